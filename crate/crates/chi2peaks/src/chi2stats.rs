//! Analytic statistics of the chi-square field `Phi = sum_a (phi^a)^2`,
//! unbiased and conditioned on the stationary point at the origin: pointwise
//! moments, spherical-harmonic mode covariances, profile geometry
//! (half-width, envelopes) and asphericity.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian_bias::BiasSpec;
use crate::kernels::{ctilde_legendre_resolved, KernelSet};
use crate::spectrum::SpectralMoments;

const BISECT_ITERS: usize = 200;
const SCAN_POINTS: usize = 400;

/// Background mean `n sigma_0^2`.
pub fn unbiased_mean(n: usize, moments: SpectralMoments) -> f64 {
    n as f64 * moments.sigma0_sq
}

/// Background covariance `2 n C(dr)^2` at separation `dr`.
pub fn unbiased_cov(n: usize, kernels: &KernelSet, dr: f64) -> Result<f64> {
    let c = kernels.c(dr)?;
    Ok(2.0 * n as f64 * c * c)
}

/// Conditioned mean profile `n sigma_0^2 + (nubar^2 - n) C^2/sigma_0^2 - 3 D^2/sigma_1^2`.
pub fn biased_mean(bias: &BiasSpec, kernels: &KernelSet, r: f64) -> Result<f64> {
    let m = bias.moments;
    let c = kernels.c(r)?;
    let d = kernels.d(r)?;
    Ok(bias.n as f64 * m.sigma0_sq + (bias.nubar.powi(2) - bias.n as f64) * c * c / m.sigma0_sq
        - 3.0 * d * d / m.sigma1_sq)
}

/// Conditioned covariance of `Phi` between points at radii `r`, `rp`
/// subtending `cos_gamma`.
pub fn biased_cov(
    bias: &BiasSpec,
    kernels: &KernelSet,
    r: f64,
    rp: f64,
    cos_gamma: f64,
) -> Result<f64> {
    let m = bias.moments;
    let cg = cos_gamma.clamp(-1.0, 1.0);
    let delta = (r * r + rp * rp - 2.0 * r * rp * cg).max(0.0).sqrt();
    let c = kernels.c(r)?;
    let cp = kernels.c(rp)?;
    let a = kernels.c(delta)? - c * cp / m.sigma0_sq;
    let b = a - 3.0 * kernels.d(r)? * kernels.d(rp)? * cg / m.sigma1_sq;
    Ok(2.0 * (bias.n as f64 - 1.0) * a * a
        + 2.0 * b * b
        + 4.0 * bias.nubar.powi(2) * (c * cp / m.sigma0_sq) * b)
}

/// Coincidence shortcut of [`biased_cov`].
pub fn biased_variance(bias: &BiasSpec, kernels: &KernelSet, r: f64) -> Result<f64> {
    let m = bias.moments;
    let c = kernels.c(r)?;
    let d = kernels.d(r)?;
    let a = m.sigma0_sq - c * c / m.sigma0_sq;
    let b = a - 3.0 * d * d / m.sigma1_sq;
    Ok(2.0 * (bias.n as f64 - 1.0) * a * a
        + 2.0 * b * (b + 2.0 * bias.nubar.powi(2) * c * c / m.sigma0_sq))
}

/// Mean of the mode coefficient `Phi_lm(r)`: only the monopole is nonzero.
pub fn mode_mean(bias: &BiasSpec, kernels: &KernelSet, l: usize, m: i64, r: f64) -> Result<f64> {
    if l != 0 || m != 0 {
        return Ok(0.0);
    }
    Ok((4.0 * PI).sqrt() * biased_mean(bias, kernels, r)?)
}

/// `int_{-1}^{1} P_l(u) C(delta(u))^2 du` with `delta` the separation of two
/// points at radii `r`, `rp` and relative angle `acos(u)`.
fn legendre_c2_integral(kernels: &KernelSet, l: usize, r: f64, rp: f64) -> Result<f64> {
    let err = std::cell::Cell::new(None);
    let c2 = |d: f64| match kernels.c(d) {
        Ok(c) => c * c,
        Err(e) => {
            err.set(Some(e));
            0.0
        }
    };
    // C^2 varies twice as fast as C, hence the denser panel floor.
    let span = 2.0 * r.min(rp);
    let panels = 128
        .max(8 * l)
        .max((span * kernels.k_eff() / 2.0).ceil() as usize);
    let val = 2.0 * ctilde_legendre_resolved(c2, l, r, rp, panels);
    match err.take() {
        Some(e) => Err(e),
        None => Ok(val),
    }
}

/// Covariance of the mode coefficients `Phi_B,lm(r)` and `Phi_B,lm(r')`;
/// diagonal in `(l, m)` and independent of `m`.
pub fn mode_cov(bias: &BiasSpec, kernels: &KernelSet, l: usize, r: f64, rp: f64) -> Result<f64> {
    let n = bias.n as f64;
    let nb2 = bias.nubar.powi(2);
    let m = bias.moments;
    let c = kernels.c(r)?;
    let cp = kernels.c(rp)?;
    let d = kernels.d(r)?;
    let dp = kernels.d(rp)?;
    let ct = kernels.ctilde(l, r, rp)?;
    let ct_up = kernels.ctilde(l + 1, r, rp)?;
    let ct_dn = if l > 0 { kernels.ctilde(l - 1, r, rp)? } else { 0.0 };

    let mut v = n * legendre_c2_integral(kernels, l, r, rp)?;
    v += 4.0 * (c * cp / m.sigma0_sq) * (nb2 - n) * ct;
    v -= 12.0 / (2 * l + 1) as f64 * (d * dp / m.sigma1_sq)
        * ((l as f64 + 1.0) * ct_up + l as f64 * ct_dn);
    if l == 0 {
        v += 2.0
            * ((c * c * cp * cp / m.sigma0_sq.powi(2)) * (n - 2.0 * nb2)
                + 3.0 * d * d * dp * dp / m.sigma1_sq.powi(2));
    }
    if l == 1 {
        v -= 4.0 * (c * cp / m.sigma0_sq) * (d * dp / m.sigma1_sq) * (nb2 - 1.0);
    }
    if l == 2 {
        v += 12.0 / 5.0 * d * d * dp * dp / m.sigma1_sq.powi(2);
    }
    Ok(4.0 * PI * v)
}

/// Partial sum `(1/4 pi) sum_{l<=L} (2l+1) Var(Phi_B,l0(r))`, which converges
/// to [`biased_variance`] as `L` grows.
pub fn variance_mode_sum(bias: &BiasSpec, kernels: &KernelSet, r: f64, big_l: usize) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..=big_l {
        total += (2 * l + 1) as f64 * mode_cov(bias, kernels, l, r, r)?;
    }
    Ok(total / (4.0 * PI))
}

/// Field/field correlation coefficient `rho_C = C / sigma_0^2`.
pub fn rho_c(kernels: &KernelSet, r: f64) -> Result<f64> {
    Ok(kernels.c(r)? / kernels.moments().sigma0_sq)
}

/// Field/gradient correlation coefficient `rho_D = sqrt(3) D / (sigma_0 sigma_1)`.
pub fn rho_d(kernels: &KernelSet, r: f64) -> Result<f64> {
    let m = kernels.moments();
    Ok(3f64.sqrt() * kernels.d(r)? / (m.sigma0_sq * m.sigma1_sq).sqrt())
}

/// Radius where the estimated profile has covered a fraction `1 - alpha` of
/// the drop towards background: the root of `rho_C(r) = sqrt(alpha)`.
/// Requires `rho_C` monotone decreasing, which fails for sharply peaked
/// (e.g. monochromatic) spectra.
pub fn r_alpha(kernels: &KernelSet, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let r_max = kernels.grid().r_max();
    let mut prev = rho_c(kernels, 0.0)?;
    for i in 1..=SCAN_POINTS {
        let cur = rho_c(kernels, i as f64 / SCAN_POINTS as f64 * r_max)?;
        if cur > prev + 1e-12 {
            return Err(Error::NonMonotoneCorrelation);
        }
        prev = cur;
    }
    let target = alpha.sqrt();
    if prev > target {
        return Err(Error::RootNotBracketed { context: "r_alpha".into(), rmax: r_max });
    }
    let (mut lo, mut hi) = (0.0, r_max);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if rho_c(kernels, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// First root of `f` scanning outward from `from` towards `to` (either
/// direction), refined by bisection. `None` when `f` never changes sign.
fn first_crossing<F: Fn(f64) -> Result<f64>>(f: F, from: f64, to: f64) -> Result<Option<f64>> {
    let mut a = from;
    let mut fa = f(a)?;
    for i in 1..=SCAN_POINTS {
        let b = from + (to - from) * i as f64 / SCAN_POINTS as f64;
        let fb = f(b)?;
        if fa == 0.0 {
            return Ok(Some(a));
        }
        if fa * fb <= 0.0 {
            let (mut lo, mut hi, mut flo) = (a, b, fa);
            for _ in 0..BISECT_ITERS {
                let mid = 0.5 * (lo + hi);
                let fmid = f(mid)?;
                if flo * fmid <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fmid;
                }
                if (hi - lo).abs() <= 1e-10 * hi.abs().max(1e-300) {
                    break;
                }
            }
            return Ok(Some(0.5 * (lo + hi)));
        }
        a = b;
        fa = fb;
    }
    Ok(None)
}

/// Radius where the exact mean has covered a fraction `1 - alpha` of the gap
/// between the pinned value `nu^2` and the background.
pub fn r_alpha_exact(bias: &BiasSpec, kernels: &KernelSet, alpha: f64) -> Result<f64> {
    let bg = unbiased_mean(bias.n, bias.moments);
    let target = alpha * (bias.nu * bias.nu - bg) + bg;
    let r_max = kernels.grid().r_max();
    first_crossing(
        |r| Ok(biased_mean(bias, kernels, r)? - target),
        1e-12 * r_max,
        r_max,
    )?
    .ok_or(Error::RootNotBracketed { context: "exact r_alpha".into(), rmax: r_max })
}

/// Profile width and one-sigma width envelope.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EnvelopeEstimates {
    /// Exact mean-based half-width.
    pub r_half: f64,
    /// The `rho_C`-only estimate of the half-width (when `rho_C` is monotone).
    pub r_half_estimate: Option<f64>,
    /// Closed-form peak ratio `2 / nubar` for `Delta r_half / r_half`.
    pub peak_ratio: f64,
    /// Closed-form trough ratio `1 / (1 + sqrt(n/2))`.
    pub trough_ratio: f64,
    /// Exact inner envelope width from root-solving mean -/+ sd.
    pub delta_left: Option<f64>,
    /// Exact outer envelope width; absent when the envelope never returns to
    /// the half-height level (it wanders into the background band).
    pub delta_right: Option<f64>,
}

/// Half-width envelope: closed-form ratios plus the exact widths obtained by
/// root-solving the envelope condition against the exact mean and variance.
pub fn envelope_estimates(bias: &BiasSpec, kernels: &KernelSet) -> Result<EnvelopeEstimates> {
    let n = bias.n as f64;
    let r_half = r_alpha_exact(bias, kernels, 0.5)?;
    let r_half_estimate = r_alpha(kernels, 0.5).ok();
    let target = biased_mean(bias, kernels, r_half)?;
    // Peaks fall towards background, troughs climb; the envelope side that
    // re-crosses the half-height level flips sign accordingly.
    let peak = bias.nubar.powi(2) >= n;
    let sign = if peak { 1.0 } else { -1.0 };
    let r_max = kernels.grid().r_max();
    let left = first_crossing(
        |r| {
            Ok(biased_mean(bias, kernels, r)? - sign * biased_variance(bias, kernels, r)?.max(0.0).sqrt()
                - target)
        },
        r_half,
        1e-12 * r_max,
    )?;
    let right = first_crossing(
        |r| {
            Ok(biased_mean(bias, kernels, r)? + sign * biased_variance(bias, kernels, r)?.max(0.0).sqrt()
                - target)
        },
        r_half,
        r_max,
    )?;
    Ok(EnvelopeEstimates {
        r_half,
        r_half_estimate,
        peak_ratio: 2.0 / bias.nubar,
        trough_ratio: 1.0 / (1.0 + (n / 2.0).sqrt()),
        delta_left: left.map(|r| r_half - r),
        delta_right: right.map(|r| r - r_half),
    })
}

/// Aspherical variance `sigma_as^2 = Var(Phi_B) - Var(Phi_B,00)/4pi` and the
/// asphericity ratio `As = sigma_as^2 / (sigma_as^2 + (mean - background)^2)`.
/// The exact formulas are the primary route; `big_l` controls the mode-sum
/// cross-check residual reported by [`mode_sum_residual`]. At the one point
/// where both numerator and mean deviation vanish (the origin with
/// `nubar^2 = n`), `As` is defined as 1.
pub fn asphericity(bias: &BiasSpec, kernels: &KernelSet, r: f64) -> Result<(f64, f64)> {
    let sigma_as_sq = (biased_variance(bias, kernels, r)?
        - mode_cov(bias, kernels, 0, r, r)? / (4.0 * PI))
        .max(0.0);
    let dev = biased_mean(bias, kernels, r)? - unbiased_mean(bias.n, bias.moments);
    let denom = sigma_as_sq + dev * dev;
    let as_ratio = if denom == 0.0 { 1.0 } else { (sigma_as_sq / denom).clamp(0.0, 1.0) };
    Ok((sigma_as_sq, as_ratio))
}

/// Residual of the truncated mode-sum route against the exact variance at
/// radius `r`: `biased_variance - variance_mode_sum(.., big_l)`.
pub fn mode_sum_residual(bias: &BiasSpec, kernels: &KernelSet, r: f64, big_l: usize) -> Result<f64> {
    Ok(biased_variance(bias, kernels, r)? - variance_mode_sum(bias, kernels, r, big_l)?)
}

/// The `rho_D`-neglected approximations of the mean and variance profiles,
/// for reporting alongside the exact values.
pub fn approx_profile(bias: &BiasSpec, kernels: &KernelSet, r: f64) -> Result<(f64, f64)> {
    let n = bias.n as f64;
    let bg = unbiased_mean(bias.n, bias.moments);
    let rc2 = rho_c(kernels, r)?.powi(2);
    let mean = bg * (1.0 + (bias.nubar.powi(2) / n - 1.0) * rc2);
    let var = 2.0 / n * (mean * mean - bias.nu.powi(4) * rc2 * rc2);
    Ok((mean, var))
}

/// Radius where aspherical scatter overtakes the mean deviation from
/// background (`As = 0.5`); `None` when no crossing exists on the grid.
pub fn r_sph(bias: &BiasSpec, kernels: &KernelSet) -> Result<Option<f64>> {
    let r_max = kernels.grid().r_max();
    first_crossing(
        |r| Ok(asphericity(bias, kernels, r)?.1 - 0.5),
        1e-12 * r_max,
        r_max,
    )
}

/// Per-radius analytic profile data.
#[derive(Clone, Debug, Serialize)]
pub struct ProfileRow {
    pub r: f64,
    pub mean: f64,
    pub variance: f64,
    pub envelope_lo: f64,
    pub envelope_hi: f64,
    pub sigma_as_sq: f64,
    pub asphericity: f64,
    pub rho_c: f64,
    pub rho_d: f64,
    pub mean_approx: f64,
    pub variance_approx: f64,
}

/// Full analytic profile: per-radius rows plus the scalar geometry.
#[derive(Clone, Debug, Serialize)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub envelope: EnvelopeEstimates,
    pub r_sph: Option<f64>,
    /// `beta = r_sph / r_half`.
    pub beta: Option<f64>,
}

pub fn profile_report(bias: &BiasSpec, kernels: &KernelSet) -> Result<ProfileReport> {
    let mut rows = Vec::with_capacity(kernels.grid().len());
    for &r in kernels.grid().radii() {
        let mean = biased_mean(bias, kernels, r)?;
        let variance = biased_variance(bias, kernels, r)?.max(0.0);
        let sd = variance.sqrt();
        let (sigma_as_sq, as_ratio) = asphericity(bias, kernels, r)?;
        let (mean_approx, variance_approx) = approx_profile(bias, kernels, r)?;
        rows.push(ProfileRow {
            r,
            mean,
            variance,
            envelope_lo: mean - sd,
            envelope_hi: mean + sd,
            sigma_as_sq,
            asphericity: as_ratio,
            rho_c: rho_c(kernels, r)?,
            rho_d: rho_d(kernels, r)?,
            mean_approx,
            variance_approx,
        });
    }
    let envelope = envelope_estimates(bias, kernels)?;
    let r_sph = r_sph(bias, kernels)?;
    Ok(ProfileReport {
        rows,
        envelope,
        beta: r_sph.map(|r| r / envelope.r_half),
        r_sph,
    })
}

/// Mean and covariance of one mode coefficient over the radial grid.
#[derive(Clone, Debug, Serialize)]
pub struct ModeStats {
    pub l: usize,
    pub m: i64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

pub fn mode_stats(bias: &BiasSpec, kernels: &KernelSet, l: usize, m: i64) -> Result<ModeStats> {
    let grid = kernels.grid();
    let mut mean = Vec::with_capacity(grid.len());
    for &r in grid.radii() {
        mean.push(mode_mean(bias, kernels, l, m, r)?);
    }
    let mut cov = vec![vec![0.0; grid.len()]; grid.len()];
    for i in 0..grid.len() {
        for j in i..grid.len() {
            let v = mode_cov(bias, kernels, l, grid.r(i), grid.r(j))?;
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    Ok(ModeStats { l, m, mean, cov })
}
