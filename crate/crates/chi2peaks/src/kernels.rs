//! Radial correlation kernels and their tabulation on a grid.
//!
//! Three kernels drive everything downstream:
//!
//! * `C(r)   = 4 pi int dk k^2 P(k) sinc(k r)` — field/field correlation,
//! * `D(r)   = 4 pi int dk k^3 P(k) j_1(k r)` — field/gradient correlation,
//! * `Ctilde_l(r, r') = 4 pi int dk k^2 P(k) j_l(k r) j_l(k r')` — per-multipole
//!   correlation of spherical-harmonic coefficients.
//!
//! `Ctilde_l` has a second, mathematically equivalent route through a Legendre
//! projection of `C` over the enclosed angle; `build_kernel_set` picks whichever
//! is cheaper per entry and the two are cross-checked in tests. Note that
//! `C'(r) = -D(r)`, which the interpolation table exploits for Hermite accuracy.

use std::f64::consts::PI;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harmonics::{legendre_p, spherical_jl};
use crate::quad::{integrate_oscillatory, GaussLegendre};
use crate::spectrum::{PowerSpectrum, SpectralMoments};

/// Crossover in `k_eff * max(r, r')` between the spectral and Legendre routes
/// for `Ctilde_l`: beyond it the k-integrand oscillates too many times.
const ROUTE_CROSSOVER: f64 = 40.0;

/// Default absolute tolerance per kernel entry, in units of sigma_0^2.
pub const DEFAULT_TOL_REL: f64 = 1e-9;

/// Strictly increasing radii, all positive, with the largest being `r_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    radii: Vec<f64>,
}

impl RadialGrid {
    pub fn new(radii: Vec<f64>) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::InvalidGrid("radial grid must be non-empty".into()));
        }
        if !(radii[0] > 0.0) {
            return Err(Error::InvalidGrid("radial grid points must be positive".into()));
        }
        if radii.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidGrid("radial grid points must be finite".into()));
        }
        for w in radii.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidGrid("radial grid must be strictly increasing".into()));
            }
        }
        Ok(Self { radii })
    }

    /// `points` equally spaced radii ending at `r_max` (origin excluded).
    pub fn uniform(r_max: f64, points: usize) -> Result<Self> {
        if !(r_max > 0.0) || points == 0 {
            return Err(Error::InvalidGrid("uniform grid needs r_max > 0 and points > 0".into()));
        }
        let h = r_max / points as f64;
        Self::new((1..=points).map(|i| i as f64 * h).collect())
    }

    /// `points` logarithmically spaced radii from `r_min` to `r_max`.
    pub fn log_spaced(r_min: f64, r_max: f64, points: usize) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min) || points < 2 {
            return Err(Error::InvalidGrid(
                "log grid needs 0 < r_min < r_max and at least two points".into(),
            ));
        }
        let lr0 = r_min.ln();
        let step = (r_max.ln() - lr0) / (points - 1) as f64;
        let mut radii: Vec<f64> =
            (0..points).map(|i| (lr0 + i as f64 * step).exp()).collect();
        radii[points - 1] = r_max;
        Self::new(radii)
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn r(&self, i: usize) -> f64 {
        self.radii[i]
    }

    pub fn r_max(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    pub fn max_spacing(&self) -> f64 {
        let mut max = self.radii[0];
        for w in self.radii.windows(2) {
            max = max.max(w[1] - w[0]);
        }
        max
    }

    /// Index of `r` if it coincides with a grid point (to 1e-12 relative).
    pub fn index_of(&self, r: f64) -> Option<usize> {
        let i = match self.radii.binary_search_by(|v| v.partial_cmp(&r).unwrap()) {
            Ok(i) => return Some(i),
            Err(i) => i,
        };
        for j in [i.wrapping_sub(1), i] {
            if let Some(&v) = self.radii.get(j) {
                if (v - r).abs() <= 1e-12 * v.max(1.0) {
                    return Some(j);
                }
            }
        }
        None
    }

    /// The grid must resolve half the shortest relevant wavelength.
    pub fn validate_nyquist(&self, k_eff: f64) -> Result<()> {
        let limit = PI / k_eff;
        let spacing = self.max_spacing();
        if spacing >= limit {
            return Err(Error::InvalidGrid(format!(
                "grid spacing {spacing:.4e} exceeds the Nyquist limit pi/k_eff = {limit:.4e}"
            )));
        }
        Ok(())
    }
}

/// Cubic-Hermite table of `C` on a uniform grid over `[0, delta_max]`,
/// using the exact derivative `C' = -D` at the nodes.
#[derive(Clone, Debug)]
struct CdTable {
    h: f64,
    delta_max: f64,
    c: Vec<f64>,
    /// dC/dr at the nodes (equal to -D).
    cp: Vec<f64>,
    d_table: Vec<f64>,
}

impl CdTable {
    fn build(spec: &PowerSpectrum, delta_max: f64, k_eff: f64, tol: f64) -> Result<Self> {
        let n = ((delta_max * k_eff * 16.0).ceil() as usize).clamp(1024, 32768);
        let h = delta_max / n as f64;
        let values: Vec<(f64, f64)> = (0..=n)
            .into_par_iter()
            .map(|i| {
                let r = i as f64 * h;
                Ok((c_of_r_tol(spec, r, tol)?, d_of_r_tol(spec, r, tol)?))
            })
            .collect::<Result<_>>()?;
        let c = values.iter().map(|v| v.0).collect();
        let d_table: Vec<f64> = values.iter().map(|v| v.1).collect();
        let cp = d_table.iter().map(|&d| -d).collect();
        Ok(Self { h, delta_max, c, cp, d_table })
    }

    fn segment(&self, r: f64) -> (usize, f64) {
        let i = ((r / self.h) as usize).min(self.c.len() - 2);
        (i, (r - i as f64 * self.h) / self.h)
    }

    fn eval_c(&self, r: f64) -> f64 {
        let (i, t) = self.segment(r);
        hermite(t, self.c[i], self.cp[i] * self.h, self.c[i + 1], self.cp[i + 1] * self.h)
    }

    fn eval_d(&self, r: f64) -> f64 {
        // Plain cubic interpolation of D (no exact derivative available).
        let (i, t) = self.segment(r);
        let n = self.d_table.len();
        let d0 = &self.d_table;
        let slope = |j: usize| -> f64 {
            if j == 0 {
                d0[1] - d0[0]
            } else if j == n - 1 {
                d0[n - 1] - d0[n - 2]
            } else {
                0.5 * (d0[j + 1] - d0[j - 1])
            }
        };
        hermite(t, d0[i], slope(i), d0[i + 1], slope(i + 1))
    }
}

fn hermite(t: f64, y0: f64, m0: f64, y1: f64, m1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + t) * m0
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - t2) * m1
}

/// Integrates `g(k)` over the spectrum's support, using Bessel-zero
/// subdivision with oscillation radius `r_osc` and order `l`.
fn spectrum_integral<F: Fn(f64) -> f64>(
    spec: &PowerSpectrum,
    g: F,
    l: usize,
    r_osc: f64,
    tol: f64,
    ctx: &str,
) -> Result<f64> {
    match spec {
        PowerSpectrum::Monochromatic { .. } => unreachable!("delta spectra are handled in closed form"),
        PowerSpectrum::ExponentialFamily { amplitude, power, scale } => {
            // Truncate where the spectral weight (k^2 P times the k factor of
            // D-type integrands) has decayed far below the tolerance, so the
            // tail termination never has to hunt past a distant Bessel
            // turning point.
            let weight = |k: f64| amplitude * k.powf(power + 4.0) * (-k / scale).exp();
            let mut k_cut = scale * (power + 4.0).max(1.0) * 8.0;
            while weight(k_cut) > tol * 1e-6 && k_cut < scale * 1e6 {
                k_cut *= 1.5;
            }
            integrate_oscillatory(g, l, r_osc, 0.0, k_cut, *scale, tol, ctx)
        }
        PowerSpectrum::Tabulated { k, .. } => {
            let mut total = 0.0;
            for seg in k.windows(2) {
                let step = (seg[1] - seg[0]) / 4.0;
                total += integrate_oscillatory(&g, l, r_osc, seg[0], seg[1], step, tol, ctx)?;
            }
            Ok(total)
        }
    }
}

fn default_tol(spec: &PowerSpectrum) -> Result<f64> {
    Ok(DEFAULT_TOL_REL * spec.moment(0)?)
}

fn c_of_r_tol(spec: &PowerSpectrum, r: f64, tol: f64) -> Result<f64> {
    debug_assert!(r >= 0.0);
    if let PowerSpectrum::Monochromatic { k0, sigma0_sq } = spec {
        return Ok(sigma0_sq * spherical_jl(0, k0 * r));
    }
    if r == 0.0 {
        return spec.moment(0);
    }
    spectrum_integral(
        spec,
        |k| 4.0 * PI * k * k * spec.density(k) * spherical_jl(0, k * r),
        0,
        r,
        tol,
        "C(r)",
    )
}

fn d_of_r_tol(spec: &PowerSpectrum, r: f64, tol: f64) -> Result<f64> {
    debug_assert!(r >= 0.0);
    if let PowerSpectrum::Monochromatic { k0, sigma0_sq } = spec {
        return Ok(sigma0_sq * k0 * spherical_jl(1, k0 * r));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    spectrum_integral(
        spec,
        |k| 4.0 * PI * k * k * k * spec.density(k) * spherical_jl(1, k * r),
        1,
        r,
        tol,
        "D(r)",
    )
}

/// `C(r) = 4 pi int dk k^2 P(k) sinc(k r)`.
pub fn c_of_r(spec: &PowerSpectrum, r: f64) -> Result<f64> {
    c_of_r_tol(spec, r, default_tol(spec)?)
}

/// `D(r) = 4 pi int dk k^3 P(k) j_1(k r)`.
pub fn d_of_r(spec: &PowerSpectrum, r: f64) -> Result<f64> {
    d_of_r_tol(spec, r, default_tol(spec)?)
}

fn ctilde_spectral_tol(
    spec: &PowerSpectrum,
    l: usize,
    r: f64,
    rp: f64,
    tol: f64,
) -> Result<f64> {
    debug_assert!(r >= 0.0 && rp >= 0.0);
    if let PowerSpectrum::Monochromatic { k0, sigma0_sq } = spec {
        return Ok(sigma0_sq * spherical_jl(l, k0 * r) * spherical_jl(l, k0 * rp));
    }
    if r == 0.0 || rp == 0.0 {
        // j_l(0) = delta_l0, so only the monopole survives and reduces to C.
        return if l == 0 { c_of_r_tol(spec, r.max(rp), tol) } else { Ok(0.0) };
    }
    let r_osc = r.max(rp);
    spectrum_integral(
        spec,
        |k| {
            4.0 * PI * k * k * spec.density(k) * spherical_jl(l, k * r) * spherical_jl(l, k * rp)
        },
        l,
        r_osc,
        tol,
        "Ctilde_l spectral",
    )
}

/// `Ctilde_l(r, r') = 4 pi int dk k^2 P(k) j_l(k r) j_l(k r')` (spectral route).
pub fn ctilde_spectral(spec: &PowerSpectrum, l: usize, r: f64, rp: f64) -> Result<f64> {
    ctilde_spectral_tol(spec, l, r, rp, default_tol(spec)?)
}

/// Legendre route with explicit radial resolution: the angular integral is
/// recast in the separation `d = |r - r'|..r + r'` and integrated with
/// composite Gauss-Legendre over `n_panels` panels, so the panel width — not
/// the Legendre order — controls how well sharp structure in C is resolved.
pub fn ctilde_legendre_resolved<F: Fn(f64) -> f64>(
    kernel_c: F,
    l: usize,
    r: f64,
    rp: f64,
    n_panels: usize,
) -> f64 {
    if r == 0.0 || rp == 0.0 {
        // The integrand is constant in u; int P_l du = 2 delta_l0.
        return if l == 0 { kernel_c(r.max(rp)) } else { 0.0 };
    }
    let d_lo = (r - rp).abs();
    let d_hi = r + rp;
    let rule = GaussLegendre::cached(16);
    let h = (d_hi - d_lo) / n_panels as f64;
    let mut total = 0.0;
    for i in 0..n_panels {
        let a = d_lo + i as f64 * h;
        total += rule.integrate(a, a + h, |d| {
            let u = ((r * r + rp * rp - d * d) / (2.0 * r * rp)).clamp(-1.0, 1.0);
            legendre_p(l, u) * kernel_c(d) * d / (r * rp)
        });
    }
    0.5 * total
}

/// `Ctilde_l(r, r')` via the Legendre projection of `C` over the enclosed angle.
pub fn ctilde_legendre<F: Fn(f64) -> f64>(kernel_c: F, l: usize, r: f64, rp: f64) -> f64 {
    ctilde_legendre_resolved(kernel_c, l, r, rp, 128.max(8 * l))
}

/// All kernels tabulated on a radial grid, with `Ctilde_l` for
/// `l = 0 ..= l_max + 1` (the extra multipole feeds the mode-covariance
/// coupling terms). Immutable once built; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct KernelSet {
    spectrum: PowerSpectrum,
    grid: RadialGrid,
    l_max: usize,
    tol: f64,
    moments: SpectralMoments,
    k_eff: f64,
    cr: Vec<f64>,
    dr: Vec<f64>,
    ctilde: Vec<DMatrix<f64>>,
    table: Option<CdTable>,
}

/// Builds the kernel tables with the default per-entry tolerance.
pub fn build_kernel_set(spec: &PowerSpectrum, grid: &RadialGrid, l_max: usize) -> Result<KernelSet> {
    build_kernel_set_with_tol(spec, grid, l_max, default_tol(spec)?)
}

pub fn build_kernel_set_with_tol(
    spec: &PowerSpectrum,
    grid: &RadialGrid,
    l_max: usize,
    tol: f64,
) -> Result<KernelSet> {
    if l_max < 2 {
        return Err(Error::Domain(format!("l_max must be at least 2, got {l_max}")));
    }
    let moments = spec.moments()?;
    let k_eff = spec.effective_kmax(0.95)?;
    grid.validate_nyquist(k_eff)?;

    let table = match spec {
        PowerSpectrum::Monochromatic { .. } => None,
        _ => Some(CdTable::build(spec, 2.0 * grid.r_max() * (1.0 + 1e-9), k_eff, tol)?),
    };

    let cd: Vec<(f64, f64)> = grid
        .radii()
        .par_iter()
        .map(|&r| Ok((c_of_r_tol(spec, r, tol)?, d_of_r_tol(spec, r, tol)?)))
        .collect::<Result<_>>()?;
    let cr: Vec<f64> = cd.iter().map(|v| v.0).collect();
    let dr: Vec<f64> = cd.iter().map(|v| v.1).collect();

    let m = grid.len();
    let kernel_c = |d: f64| -> f64 {
        match (&table, spec) {
            (_, PowerSpectrum::Monochromatic { k0, sigma0_sq }) => {
                sigma0_sq * spherical_jl(0, k0 * d)
            }
            (Some(t), _) => t.eval_c(d),
            (None, _) => unreachable!(),
        }
    };
    let entries: Vec<((usize, usize, usize), f64)> = (0..=l_max + 1)
        .flat_map(|l| (0..m).flat_map(move |i| (i..m).map(move |j| (l, i, j))))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(l, i, j)| {
            let (ri, rj) = (grid.r(i), grid.r(j));
            let value = if k_eff * ri.max(rj) <= ROUTE_CROSSOVER {
                ctilde_spectral_tol(spec, l, ri, rj, tol).map_err(|e| match e {
                    Error::QuadratureNonConvergence { achieved, requested, .. } => {
                        Error::QuadratureNonConvergence {
                            context: format!("Ctilde (l={l}, i={i}, j={j})"),
                            achieved,
                            requested,
                        }
                    }
                    other => other,
                })?
            } else {
                let span = ri + rj - (ri - rj).abs();
                let panels = 128.max(8 * l).max((span * k_eff / 4.0).ceil() as usize);
                ctilde_legendre_resolved(kernel_c, l, ri, rj, panels)
            };
            Ok(((l, i, j), value))
        })
        .collect::<Result<_>>()?;

    let mut ctilde = vec![DMatrix::zeros(m, m); l_max + 2];
    for ((l, i, j), v) in entries {
        ctilde[l][(i, j)] = v;
        ctilde[l][(j, i)] = v;
    }

    Ok(KernelSet {
        spectrum: spec.clone(),
        grid: grid.clone(),
        l_max,
        tol,
        moments,
        k_eff,
        cr,
        dr,
        ctilde,
        table,
    })
}

impl KernelSet {
    pub fn spectrum(&self) -> &PowerSpectrum {
        &self.spectrum
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn moments(&self) -> SpectralMoments {
        self.moments
    }

    pub fn k_eff(&self) -> f64 {
        self.k_eff
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Tabulated `C(r_i)`.
    pub fn cr(&self) -> &[f64] {
        &self.cr
    }

    /// Tabulated `D(r_i)`.
    pub fn dr(&self) -> &[f64] {
        &self.dr
    }

    /// `C(r)` at arbitrary radius: closed form for delta spectra, the Hermite
    /// table within its span, direct quadrature beyond.
    pub fn c(&self, r: f64) -> Result<f64> {
        if let PowerSpectrum::Monochromatic { k0, sigma0_sq } = &self.spectrum {
            return Ok(sigma0_sq * spherical_jl(0, k0 * r));
        }
        match &self.table {
            Some(t) if r <= t.delta_max => Ok(t.eval_c(r)),
            _ => c_of_r_tol(&self.spectrum, r, self.tol),
        }
    }

    /// `D(r)` at arbitrary radius; see [`KernelSet::c`].
    pub fn d(&self, r: f64) -> Result<f64> {
        if let PowerSpectrum::Monochromatic { k0, sigma0_sq } = &self.spectrum {
            return Ok(sigma0_sq * k0 * spherical_jl(1, k0 * r));
        }
        match &self.table {
            Some(t) if r <= t.delta_max => Ok(t.eval_d(r)),
            _ => d_of_r_tol(&self.spectrum, r, self.tol),
        }
    }

    /// Tabulated `Ctilde_l(r_i, r_j)`; `l` may go up to `l_max + 1`.
    pub fn ctilde_grid(&self, l: usize, i: usize, j: usize) -> f64 {
        self.ctilde[l][(i, j)]
    }

    /// Full tabulated matrix for multipole `l`.
    pub fn ctilde_matrix(&self, l: usize) -> &DMatrix<f64> {
        &self.ctilde[l]
    }

    /// `Ctilde_l` at arbitrary radii: table lookup when both radii are grid
    /// points and `l` is tabulated, otherwise computed on demand.
    pub fn ctilde(&self, l: usize, r: f64, rp: f64) -> Result<f64> {
        if l < self.ctilde.len() {
            if let (Some(i), Some(j)) = (self.grid.index_of(r), self.grid.index_of(rp)) {
                return Ok(self.ctilde[l][(i, j)]);
            }
        }
        if self.k_eff * r.max(rp) <= ROUTE_CROSSOVER {
            ctilde_spectral_tol(&self.spectrum, l, r, rp, self.tol)
        } else {
            let span = r + rp - (r - rp).abs();
            let panels = 128.max(8 * l).max((span * self.k_eff / 4.0).ceil() as usize);
            Ok(ctilde_legendre_resolved(|d| self.c(d).unwrap(), l, r, rp, panels))
        }
    }

    /// Partial mode sum `sum_{l<=L} (2l+1) Ctilde_l(r_i, r_i)`, which climbs
    /// towards sigma_0^2 as L grows.
    pub fn mode_sum_partial(&self, big_l: usize, i: usize) -> f64 {
        (0..=big_l.min(self.l_max + 1))
            .map(|l| (2 * l + 1) as f64 * self.ctilde[l][(i, i)])
            .sum()
    }

    fn content_hash(spec: &PowerSpectrum, grid: &RadialGrid, l_max: usize, tol: f64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(spec.content_key().as_bytes());
        for &r in grid.radii() {
            hasher.update(r.to_le_bytes());
        }
        hasher.update((l_max as u64).to_le_bytes());
        hasher.update(tol.to_le_bytes());
        hasher.finalize().into()
    }

    /// Writes the tables to a versioned binary cache file.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&Self::content_hash(&self.spectrum, &self.grid, self.l_max, self.tol));
        let m = self.grid.len() as u64;
        buf.extend_from_slice(&m.to_le_bytes());
        buf.extend_from_slice(&(self.l_max as u64).to_le_bytes());
        let mut push = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        for &v in &self.cr {
            push(v);
        }
        for &v in &self.dr {
            push(v);
        }
        for mat in &self.ctilde {
            for v in mat.iter() {
                push(*v);
            }
        }
        match &self.table {
            None => buf.extend_from_slice(&0u64.to_le_bytes()),
            Some(t) => {
                buf.extend_from_slice(&(t.c.len() as u64).to_le_bytes());
                buf.extend_from_slice(&t.h.to_le_bytes());
                buf.extend_from_slice(&t.delta_max.to_le_bytes());
                for &v in t.c.iter().chain(&t.d_table) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a cache if it exists and its content hash matches the requested
    /// configuration; returns `Ok(None)` on any mismatch so the caller rebuilds.
    pub fn load_cache(
        path: &Path,
        spec: &PowerSpectrum,
        grid: &RadialGrid,
        l_max: usize,
        tol: f64,
    ) -> Result<Option<KernelSet>> {
        let mut buf = Vec::new();
        match std::fs::File::open(path) {
            Ok(mut f) => f.read_to_end(&mut buf)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            let s = buf
                .get(pos..end)
                .ok_or_else(|| Error::Config(format!("truncated kernel cache {}", path.display())))?;
            pos = end;
            Ok(s)
        };
        if take(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Ok(None);
        }
        if take(32)? != Self::content_hash(spec, grid, l_max, tol) {
            return Ok(None);
        }
        let read_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let m = read_u64(take(8)?) as usize;
        let file_lmax = read_u64(take(8)?) as usize;
        if m != grid.len() || file_lmax != l_max {
            return Ok(None);
        }
        let floats = |n: usize, pos: &mut usize| -> Result<Vec<f64>> {
            let end = *pos + n * 8;
            let s = buf
                .get(*pos..end)
                .ok_or_else(|| Error::Config(format!("truncated kernel cache {}", path.display())))?;
            *pos = end;
            Ok(s.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let cr = floats(m, &mut pos)?;
        let dr = floats(m, &mut pos)?;
        let mut ctilde = Vec::with_capacity(l_max + 2);
        for _ in 0..=l_max + 1 {
            ctilde.push(DMatrix::from_column_slice(m, m, &floats(m * m, &mut pos)?));
        }
        let tn = {
            let end = pos + 8;
            let s = buf
                .get(pos..end)
                .ok_or_else(|| Error::Config(format!("truncated kernel cache {}", path.display())))?;
            pos = end;
            u64::from_le_bytes(s.try_into().unwrap()) as usize
        };
        let table = if tn == 0 {
            None
        } else {
            let hd = floats(2, &mut pos)?;
            let c = floats(tn, &mut pos)?;
            let d_table = floats(tn, &mut pos)?;
            let cp = d_table.iter().map(|&d| -d).collect();
            Some(CdTable { h: hd[0], delta_max: hd[1], c, cp, d_table })
        };
        Ok(Some(KernelSet {
            spectrum: spec.clone(),
            grid: grid.clone(),
            l_max,
            tol,
            moments: spec.moments()?,
            k_eff: spec.effective_kmax(0.95)?,
            cr,
            dr,
            ctilde,
            table,
        }))
    }
}

const CACHE_MAGIC: &[u8] = b"C2PKRN01";

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn exp_spec() -> PowerSpectrum {
        PowerSpectrum::exponential_unit_variance(8.0).unwrap()
    }

    /// Closed forms for the unit-variance exponential spectrum with scale
    /// 1/a: C(r) = a^4 / (a^2 + r^2)^2 and D(r) = 4 a^4 r / (a^2 + r^2)^3.
    fn exp_c(a: f64, r: f64) -> f64 {
        a.powi(4) / (a * a + r * r).powi(2)
    }

    fn exp_d(a: f64, r: f64) -> f64 {
        4.0 * a.powi(4) * r / (a * a + r * r).powi(3)
    }

    #[test]
    fn monochromatic_c_is_sinc() {
        let s = PowerSpectrum::monochromatic(8.0, 1.0).unwrap();
        assert_abs_diff_eq!(c_of_r(&s, PI / 8.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(
            c_of_r(&s, 0.1).unwrap(),
            (0.8f64).sin() / 0.8,
            max_relative = 1e-14
        );
    }

    #[test]
    fn exponential_kernels_match_closed_forms() {
        let s = exp_spec();
        let a = 0.125;
        assert_relative_eq!(c_of_r(&s, 0.125).unwrap(), 0.25, max_relative = 1e-8);
        assert_relative_eq!(d_of_r(&s, 0.125).unwrap(), 4.0, max_relative = 1e-8);
        for &r in &[0.01, 0.3, 0.9, 2.2] {
            // Quadrature tolerance is absolute (1e-9 * sigma_0^2).
            assert_abs_diff_eq!(c_of_r(&s, r).unwrap(), exp_c(a, r), epsilon = 1e-8);
            assert_abs_diff_eq!(d_of_r(&s, r).unwrap(), exp_d(a, r), epsilon = 1e-7);
        }
    }

    #[test]
    fn zero_radius_limits() {
        let s = exp_spec();
        assert_relative_eq!(c_of_r(&s, 0.0).unwrap(), 1.0, max_relative = 1e-12);
        assert_eq!(d_of_r(&s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ctilde_spectral_special_cases() {
        let s = exp_spec();
        // r' = 0 collapses to delta_l0 C(r).
        assert_relative_eq!(
            ctilde_spectral(&s, 0, 0.3, 0.0).unwrap(),
            c_of_r(&s, 0.3).unwrap(),
            max_relative = 1e-10
        );
        assert_eq!(ctilde_spectral(&s, 2, 0.3, 0.0).unwrap(), 0.0);
        assert_relative_eq!(ctilde_spectral(&s, 0, 0.0, 0.0).unwrap(), 1.0, max_relative = 1e-12);

        let mono = PowerSpectrum::monochromatic(8.0, 1.0).unwrap();
        for l in 0..5 {
            assert_relative_eq!(
                ctilde_spectral(&mono, l, 0.4, 0.7).unwrap(),
                spherical_jl(l, 3.2) * spherical_jl(l, 5.6),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn legendre_route_agrees_with_spectral_route() {
        let s = exp_spec();
        let c = |d: f64| exp_c(0.125, d);
        let got = ctilde_legendre(c, 3, 0.4, 0.7);
        let want = ctilde_spectral(&s, 3, 0.4, 0.7).unwrap();
        assert!((got - want).abs() < 1e-6, "legendre {got} vs spectral {want}");
        // l = 0 with r' = 0 reduces to C(r).
        assert_eq!(ctilde_legendre(c, 0, 0.5, 0.0), c(0.5));
    }

    #[test]
    fn legendre_route_monochromatic() {
        let k0 = 8.0;
        let c = |d: f64| spherical_jl(0, k0 * d);
        for l in 0..6 {
            let want = spherical_jl(l, k0 * 0.4) * spherical_jl(l, k0 * 0.7);
            let got = ctilde_legendre(c, l, 0.4, 0.7);
            assert!((got - want).abs() < 1e-8, "l={l}: {got} vs {want}");
        }
    }

    #[test]
    fn kernel_set_monochromatic_matches_bessel_products() {
        let s = PowerSpectrum::monochromatic(8.0, 1.0).unwrap();
        let grid = RadialGrid::new(vec![0.1, 0.25, 0.35]).unwrap();
        let ks = build_kernel_set(&s, &grid, 2).unwrap();
        for l in 0..=3usize {
            for i in 0..3 {
                for j in 0..3 {
                    let want = spherical_jl(l, 8.0 * grid.r(i)) * spherical_jl(l, 8.0 * grid.r(j));
                    assert_relative_eq!(ks.ctilde_grid(l, i, j), want, max_relative = 1e-12);
                }
            }
        }
        assert_relative_eq!(ks.cr()[0], c_of_r(&s, 0.1).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn kernel_set_exponential_tables() {
        let s = exp_spec();
        let grid = RadialGrid::uniform(1.0, 20).unwrap();
        let ks = build_kernel_set(&s, &grid, 4).unwrap();
        for (i, &c) in ks.cr().iter().enumerate() {
            assert!(c > 0.0 && c < 1.0, "C(r_{i}) = {c} out of (0,1)");
            assert_abs_diff_eq!(c, exp_c(0.125, grid.r(i)), epsilon = 1e-8);
        }
        // Symmetry and positive diagonal.
        for l in 0..=5 {
            let m = ks.ctilde_matrix(l);
            for i in 0..grid.len() {
                assert!(m[(i, i)] >= 0.0);
                for j in 0..grid.len() {
                    assert_abs_diff_eq!(m[(i, j)], m[(j, i)], epsilon = 1e-12 * m[(i, i)].max(1e-30));
                }
            }
        }
        // Partial mode sums climb towards sigma_0^2 without overshooting.
        for i in [0, grid.len() / 2] {
            let mut prev = 0.0;
            for big_l in 0..=5 {
                let s_l = ks.mode_sum_partial(big_l, i);
                assert!(s_l + 1e-12 >= prev, "mode sum must be non-decreasing");
                assert!(s_l <= 1.0 + 1e-8, "mode sum exceeded sigma_0^2: {s_l}");
                prev = s_l;
            }
        }
        // Interpolation table agrees with direct quadrature off-grid.
        assert_relative_eq!(ks.c(0.137).unwrap(), exp_c(0.125, 0.137), max_relative = 1e-7);
        assert_relative_eq!(ks.d(0.137).unwrap(), exp_d(0.125, 0.137), max_relative = 1e-6);
    }

    #[test]
    fn nyquist_violation_rejected() {
        let s = exp_spec();
        // k_eff ~ 50.4, so spacing of 0.5 is far too coarse.
        let grid = RadialGrid::uniform(2.0, 4).unwrap();
        assert!(build_kernel_set(&s, &grid, 2).is_err());
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(RadialGrid::new(vec![]).is_err());
        assert!(RadialGrid::new(vec![0.0, 1.0]).is_err());
        assert!(RadialGrid::new(vec![0.2, 0.2]).is_err());
        assert!(RadialGrid::new(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let s = exp_spec();
        let grid = RadialGrid::uniform(0.5, 10).unwrap();
        let ks = build_kernel_set(&s, &grid, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernels.bin");
        ks.save_cache(&path).unwrap();

        let loaded = KernelSet::load_cache(&path, &s, &grid, 2, ks.tol()).unwrap().unwrap();
        assert_eq!(loaded.cr(), ks.cr());
        assert_eq!(loaded.dr(), ks.dr());
        for l in 0..=3 {
            assert_eq!(loaded.ctilde_matrix(l), ks.ctilde_matrix(l));
        }
        assert_relative_eq!(loaded.c(0.21).unwrap(), ks.c(0.21).unwrap(), max_relative = 1e-15);

        // A different configuration must be treated as a miss.
        assert!(KernelSet::load_cache(&path, &s, &grid, 3, ks.tol()).unwrap().is_none());
        let other = PowerSpectrum::exponential_unit_variance(4.0).unwrap();
        assert!(KernelSet::load_cache(&path, &other, &grid, 2, ks.tol()).unwrap().is_none());
    }
}
