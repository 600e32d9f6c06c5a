//! Sampling of the biased field on a radial grid.
//!
//! Mode coefficients φ^α_{ℓm}(r_i) are jointly Gaussian across radii and
//! independent across (α, ℓ, m), so a realization is drawn one law at a time
//! as A·Z + μ with A a factor of the law's covariance. Helpers assemble the
//! χ² field Φ_B along directions, apply the ℓ-truncation correction, and
//! classify the stationary point at the origin.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_bias::{biased_mode_cov, biased_mode_mean, BiasSpec};
use crate::harmonics::{angular_quadrature, real_ylm, UnitVector};
use crate::kernels::KernelSet;
use crate::rng::{stream_rng, StreamKey};

/// Relative eigenvalue threshold below which negative covariance eigenvalues
/// are clipped to zero during factorization.
pub const EPS_CLIP: f64 = 1e-10;

/// Truncation diagnostics for a choice of `l_max` on a radial grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationPlan {
    pub l_max: usize,
    pub k_eff: f64,
    pub r_max: f64,
    /// Fraction of sigma_0^2 recovered by modes up to `l_max`, per radius.
    pub sigma_recovery: Vec<f64>,
    /// Additive monopole correction restoring the truncated mean, per radius.
    pub e_trunc: Vec<f64>,
}

/// Rule of thumb for the smallest adequate `l_max` given the effective
/// spectral cutoff and the outermost radius. Returns the raw formula value
/// `(k r_max - 5.2) / 1.05` and a suggested integer with a +1 safety margin,
/// floored at 4 when the formula is small or negative.
pub fn lmax_rule(k_eff: f64, r_max: f64) -> (f64, usize) {
    let raw = (k_eff * r_max - 5.2) / 1.05;
    let suggested = if raw <= 0.0 { 4 } else { (raw.ceil() as usize + 1).max(4) };
    (raw, suggested)
}

/// Fraction of the field variance captured by modes `l <= l_max` at each grid
/// radius: `(1/sigma_0^2) sum_l (2l+1) Ctilde_l(r, r)`.
pub fn sigma_recovery(kernels: &KernelSet, l_max: usize) -> Vec<f64> {
    let s0 = kernels.moments().sigma0_sq;
    (0..kernels.grid().len()).map(|i| kernels.mode_sum_partial(l_max, i) / s0).collect()
}

/// Truncation plan for `n` fields at `l_max`: per-radius recovered variance
/// fraction and the monopole correction `sqrt(4 pi) n (sigma_0^2 - partial)`.
pub fn truncation_plan(kernels: &KernelSet, n: usize, l_max: usize) -> TruncationPlan {
    let s0 = kernels.moments().sigma0_sq;
    let recovery = sigma_recovery(kernels, l_max);
    let e_trunc = recovery
        .iter()
        .map(|&f| ((4.0 * PI).sqrt() * n as f64 * s0 * (1.0 - f)).max(0.0))
        .collect();
    TruncationPlan {
        l_max,
        k_eff: kernels.k_eff(),
        r_max: kernels.grid().r_max(),
        sigma_recovery: recovery,
        e_trunc,
    }
}

/// Distribution of one family of mode coefficients over the radial grid.
#[derive(Debug, Clone)]
pub struct ModeLaw {
    /// True for the field carrying the amplitude constraint (alpha = 1).
    pub first_field: bool,
    pub l: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Factor with `factor * factor^T = cov` after eigenvalue clipping.
    pub factor: DMatrix<f64>,
    /// Number of eigenvalues clipped to zero and their total magnitude.
    pub clipped: usize,
    pub clipped_mass: f64,
}

/// The distinct mode laws for a bias specification: separate first-field and
/// other-field laws at l = 0 and l = 1, one shared law per l >= 2.
#[derive(Debug, Clone)]
pub struct ModeLawSet {
    pub n: usize,
    pub l_max: usize,
    pub radii: Vec<f64>,
    pub nu: f64,
    laws: Vec<ModeLaw>,
}

impl ModeLawSet {
    /// The law governing coefficients of field `alpha` (1-based) at degree `l`.
    pub fn law(&self, alpha: usize, l: usize) -> &ModeLaw {
        let idx = match l {
            0 => usize::from(alpha != 1),
            1 => 2 + usize::from(alpha != 1),
            _ => 2 + l,
        };
        &self.laws[idx]
    }

    pub fn laws(&self) -> &[ModeLaw] {
        &self.laws
    }
}

/// Eigendecomposes a symmetric covariance and returns `(A, clipped count,
/// clipped mass)` with `A sqrt`-factored from the clipped spectrum.
/// Eigenvalues in `[-tau, 0)` are set to zero where `tau` is `EPS_CLIP` times
/// the larger of the top eigenvalue and `scale` (the unconditioned diagonal
/// magnitude, so exactly degenerate laws assembled from cancelling terms
/// factor to zero instead of failing on roundoff).
pub fn factor_covariance(cov: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, usize, f64)> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let threshold = EPS_CLIP * lambda_max.max(scale.abs() * 1e-6);
    let mut clipped = 0usize;
    let mut clipped_mass = 0.0;
    let mut sqrt_vals = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -threshold {
            return Err(Error::NotPositiveSemiDefinite {
                eigenvalue: lambda,
                threshold,
                lambda_max,
            });
        }
        if lambda <= threshold {
            // Roundoff-scale eigenvalues of either sign are zeroed so that
            // exactly degenerate laws yield an exactly zero factor.
            if lambda != 0.0 {
                clipped += 1;
                clipped_mass += lambda.abs();
            }
            continue;
        }
        sqrt_vals[i] = lambda.sqrt();
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, mut col) in factor.column_iter_mut().enumerate() {
        col *= sqrt_vals[j];
    }
    Ok((factor, clipped, clipped_mass))
}

fn build_law(
    bias: &BiasSpec,
    kernels: &KernelSet,
    first_field: bool,
    l: usize,
) -> Result<ModeLaw> {
    let radii = kernels.grid().radii();
    let m = radii.len();
    let alpha = if first_field { 1 } else { 2.min(bias.n) };
    let mut mean = DVector::zeros(m);
    for (i, &r) in radii.iter().enumerate() {
        mean[i] = biased_mode_mean(bias, kernels, alpha, l, 0, r)?;
    }
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = biased_mode_cov(bias, kernels, alpha, l, radii[i], radii[j])?;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let scale = 4.0 * PI * bias.moments.sigma0_sq;
    let (factor, clipped, clipped_mass) = factor_covariance(&cov, scale)?;
    Ok(ModeLaw { first_field, l, mean, cov, factor, clipped, clipped_mass })
}

/// Builds every distinct mode law for the bias on the kernel grid.
pub fn build_mode_laws(bias: &BiasSpec, kernels: &KernelSet, l_max: usize) -> Result<ModeLawSet> {
    if l_max > kernels.l_max() {
        return Err(Error::Domain(format!(
            "l_max = {l_max} exceeds the tabulated kernel degree {}",
            kernels.l_max()
        )));
    }
    let mut specs = vec![(true, 0), (false, 0), (true, 1), (false, 1)];
    for l in 2..=l_max {
        specs.push((true, l));
    }
    let laws = specs
        .into_iter()
        .map(|(first, l)| build_law(bias, kernels, first, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeLawSet {
        n: bias.n,
        l_max,
        radii: kernels.grid().radii().to_vec(),
        nu: bias.nu,
        laws,
    })
}

/// One realization of the biased mode coefficients on the radial grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSample {
    pub seed: u64,
    pub nu: f64,
    pub plan: TruncationPlan,
    pub radii: Vec<f64>,
    /// Coefficients indexed `[alpha - 1][l][m + l][radius]`.
    pub coefficients: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Draws one field realization. Each (alpha, l, m) coefficient vector is
/// `A Z + mu` of its law, with Z taken from a stream keyed by (seed, alpha,
/// l, m), so the result is independent of evaluation order and thread count.
pub fn draw_sample(laws: &ModeLawSet, plan: &TruncationPlan, seed: u64) -> FieldSample {
    let m_pts = laws.radii.len();
    let mut coefficients = Vec::with_capacity(laws.n);
    for alpha in 1..=laws.n {
        let mut per_l = Vec::with_capacity(laws.l_max + 1);
        for l in 0..=laws.l_max {
            let law = laws.law(alpha, l);
            let mut per_m = Vec::with_capacity(2 * l + 1);
            for m in -(l as i32)..=(l as i32) {
                let key = StreamKey { alpha: alpha as u32, l: l as u32, m };
                let mut rng = stream_rng(seed, key);
                let z = DVector::from_fn(m_pts, |_, _| rng.sample::<f64, _>(StandardNormal));
                let coeff = &law.factor * z + &law.mean;
                per_m.push(coeff.iter().cloned().collect::<Vec<f64>>());
            }
            per_l.push(per_m);
        }
        coefficients.push(per_l);
    }
    FieldSample { seed, nu: laws.nu, plan: plan.clone(), radii: laws.radii.clone(), coefficients }
}

/// Assembles `Phi_B(r_i, direction)` from the sampled coefficients.
pub fn assemble_phi(sample: &FieldSample, direction: &UnitVector) -> Result<Vec<f64>> {
    let l_max = sample.plan.l_max;
    let mut ylm = Vec::with_capacity(l_max + 1);
    for l in 0..=l_max {
        let row = (-(l as i64)..=l as i64)
            .map(|m| real_ylm(l, m, direction))
            .collect::<Result<Vec<_>>>()?;
        ylm.push(row);
    }
    let mut phi = vec![0.0; sample.radii.len()];
    for per_l in &sample.coefficients {
        for (i, phi_i) in phi.iter_mut().enumerate() {
            let mut field = 0.0;
            for (l, per_m) in per_l.iter().enumerate() {
                for (mi, coeff) in per_m.iter().enumerate() {
                    field += coeff[i] * ylm[l][mi];
                }
            }
            *phi_i += field * field;
        }
    }
    Ok(phi)
}

/// Assembles the monopole `Phi_{B,00}(r_i) = (1/sqrt(4 pi)) sum |phi_lm|^2`.
pub fn assemble_phi00(sample: &FieldSample) -> Vec<f64> {
    let mut phi00 = vec![0.0; sample.radii.len()];
    for per_l in &sample.coefficients {
        for per_m in per_l {
            for coeff in per_m {
                for (i, &c) in coeff.iter().enumerate() {
                    phi00[i] += c * c;
                }
            }
        }
    }
    for v in &mut phi00 {
        *v /= (4.0 * PI).sqrt();
    }
    phi00
}

/// `assemble_phi` plus the per-radius truncation correction `E_trunc / sqrt(4 pi)`.
pub fn assemble_phi_corrected(sample: &FieldSample, direction: &UnitVector) -> Result<Vec<f64>> {
    let mut phi = assemble_phi(sample, direction)?;
    for (v, &e) in phi.iter_mut().zip(&sample.plan.e_trunc) {
        *v += e / (4.0 * PI).sqrt();
    }
    Ok(phi)
}

/// `assemble_phi00` plus the per-radius truncation correction `E_trunc`.
pub fn assemble_phi00_corrected(sample: &FieldSample) -> Vec<f64> {
    let mut phi00 = assemble_phi00(sample);
    for (v, &e) in phi00.iter_mut().zip(&sample.plan.e_trunc) {
        *v += e;
    }
    phi00
}

/// Numeric angular projection of the assembled field onto the real harmonic
/// `(l, m)`: exact for the band-limited integrand at quadrature order
/// `2 l_max + 2`.
pub fn project_mode(sample: &FieldSample, l: usize, m: i64) -> Result<Vec<f64>> {
    let nodes = angular_quadrature(2 * sample.plan.l_max + 2);
    let mut proj = vec![0.0; sample.radii.len()];
    for (dir, w) in &nodes {
        let phi = assemble_phi(sample, dir)?;
        let y = real_ylm(l, m, dir)?;
        for (p, v) in proj.iter_mut().zip(&phi) {
            *p += w * y * v;
        }
    }
    Ok(proj)
}

/// Classification of the conditioned stationary point from probe directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationaryClass {
    PeakLike,
    TroughLike,
    SaddleLike,
}

/// Probes the assembled field on 26 directions (the nonzero sign vectors of a
/// 3x3x3 stencil) at the grid radius nearest `probe_radius` and classifies by
/// the sign pattern of `Phi - nu^2`. Ties go to saddle.
pub fn classify_stationary(sample: &FieldSample, probe_radius: f64) -> Result<StationaryClass> {
    let i = sample
        .radii
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - probe_radius).abs().total_cmp(&(b.1 - probe_radius).abs())
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Domain("empty radial grid".into()))?;
    let nu_sq = sample.nu * sample.nu;
    let mut below = 0usize;
    let mut above = 0usize;
    let mut probes = 0usize;
    for dx in -1i32..=1 {
        for dy in -1i32..=1 {
            for dz in -1i32..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let norm = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                let dir = UnitVector::from_cartesian(
                    dx as f64 / norm,
                    dy as f64 / norm,
                    dz as f64 / norm,
                )?;
                let phi = assemble_phi(sample, &dir)?;
                if phi[i] < nu_sq {
                    below += 1;
                } else if phi[i] > nu_sq {
                    above += 1;
                }
                probes += 1;
            }
        }
    }
    if below == probes {
        Ok(StationaryClass::PeakLike)
    } else if above == probes {
        Ok(StationaryClass::TroughLike)
    } else {
        Ok(StationaryClass::SaddleLike)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_kernel_set, RadialGrid};
    use crate::spectrum::PowerSpectrum;
    use approx::assert_relative_eq;
    use std::sync::OnceLock;

    fn kernels() -> &'static KernelSet {
        static CELL: OnceLock<KernelSet> = OnceLock::new();
        CELL.get_or_init(|| {
            let spec = PowerSpectrum::exponential_unit_variance(8.0).unwrap();
            let grid = RadialGrid::uniform(1.0, 18).unwrap();
            build_kernel_set(&spec, &grid, 4).unwrap()
        })
    }

    fn bias(n: usize, nubar: f64) -> BiasSpec {
        BiasSpec::from_nubar(n, nubar, kernels().moments()).unwrap()
    }

    fn pinned_sample(nu: f64, l_max: usize, radii: Vec<f64>) -> FieldSample {
        let m = radii.len();
        let plan = TruncationPlan {
            l_max,
            k_eff: 0.0,
            r_max: *radii.last().unwrap(),
            sigma_recovery: vec![1.0; m],
            e_trunc: vec![0.0; m],
        };
        let coefficients = (0..2)
            .map(|alpha| {
                (0..=l_max)
                    .map(|l| {
                        (0..2 * l + 1)
                            .map(|mi| {
                                let pinned =
                                    alpha == 0 && l == 0 && mi == 0;
                                vec![
                                    if pinned { (4.0 * PI).sqrt() * nu } else { 0.0 };
                                    m
                                ]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        FieldSample { seed: 0, nu, plan, radii, coefficients }
    }

    #[test]
    fn lmax_rule_examples() {
        let (raw, suggested) = lmax_rule(8.0, 2.5);
        assert_relative_eq!(raw, (20.0 - 5.2) / 1.05, epsilon = 1e-12);
        assert_eq!(suggested, 16);
        let (raw0, s0) = lmax_rule(2.0, 2.6);
        assert!(raw0.abs() < 1e-12);
        assert_eq!(s0, 4);
    }

    #[test]
    fn sigma_recovery_matches_bessel_partial_sum_for_monochromatic() {
        let spec = PowerSpectrum::monochromatic(6.0, 1.0).unwrap();
        let grid = RadialGrid::uniform(1.0, 8).unwrap();
        let ks = build_kernel_set(&spec, &grid, 6).unwrap();
        let rec = sigma_recovery(&ks, 6);
        for (i, &r) in grid.radii().iter().enumerate() {
            let expected: f64 = (0..=6)
                .map(|l| (2 * l + 1) as f64 * crate::harmonics::spherical_jl(l, 6.0 * r).powi(2))
                .sum();
            assert_relative_eq!(rec[i], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn truncation_plan_invariants() {
        let plan = truncation_plan(kernels(), 5, 4);
        for (&f, &e) in plan.sigma_recovery.iter().zip(&plan.e_trunc) {
            assert!(f > 0.0 && f <= 1.0 + 1e-8);
            assert!(e >= 0.0);
        }
        let plan_lo = truncation_plan(kernels(), 5, 2);
        for (hi, lo) in plan.sigma_recovery.iter().zip(&plan_lo.sigma_recovery) {
            assert!(hi >= lo);
        }
    }

    #[test]
    fn factor_reproduces_covariance() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (a, clipped, _) = factor_covariance(&cov, 4.0).unwrap();
        assert_eq!(clipped, 0);
        let back = &a * a.transpose();
        assert!((back - &cov).norm() / cov.norm() < 1e-12);
        let (id, _, _) = factor_covariance(&DMatrix::identity(4, 4), 1.0).unwrap();
        assert!((&id * id.transpose() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn factor_rejects_genuinely_negative_matrix() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match factor_covariance(&cov, 1.0) {
            Err(Error::NotPositiveSemiDefinite { eigenvalue, .. }) => assert!(eigenvalue < 0.0),
            other => panic!("expected PSD failure, got {other:?}"),
        }
    }

    #[test]
    fn mode_laws_have_expected_structure() {
        let b = bias(5, 3.0);
        let laws = build_mode_laws(&b, kernels(), 4).unwrap();
        assert_eq!(laws.laws().len(), 2 + 2 + 3);
        assert!(laws.law(1, 0).mean.iter().all(|&v| v > 0.0));
        assert!(laws.law(2, 0).mean.iter().all(|&v| v == 0.0));
        assert!(laws.law(3, 2).mean.iter().all(|&v| v == 0.0));
        // Shared law for l >= 2.
        assert!(std::ptr::eq(laws.law(1, 3), laws.law(5, 3)));
        // First-field l=1 diagonal is the D-corrected kernel and stays PSD.
        let radii = kernels().grid().radii();
        let m1 = kernels().moments();
        for (i, &r) in radii.iter().enumerate() {
            let expect = 4.0 * PI
                * (kernels().ctilde(1, r, r).unwrap()
                    - kernels().d(r).unwrap().powi(2) / m1.sigma1_sq);
            assert_relative_eq!(laws.law(1, 1).cov[(i, i)], expect, epsilon = 1e-12);
            assert!(laws.law(1, 1).cov[(i, i)] >= -1e-12);
        }
        // AA^T reconstructs each covariance.
        for law in laws.laws() {
            let back = &law.factor * law.factor.transpose();
            let denom = law.cov.norm().max(1e-12);
            assert!((back - &law.cov).norm() / denom < 1e-8);
        }
    }

    #[test]
    fn monochromatic_l1_first_field_law_factors_to_zero() {
        let spec = PowerSpectrum::monochromatic(6.0, 1.0).unwrap();
        let grid = RadialGrid::uniform(1.0, 8).unwrap();
        let ks = build_kernel_set(&spec, &grid, 3).unwrap();
        let b = BiasSpec::from_nubar(4, 2.0, ks.moments()).unwrap();
        let laws = build_mode_laws(&b, &ks, 3).unwrap();
        let law = laws.law(1, 1);
        assert!(law.factor.norm() < 1e-10);
    }

    #[test]
    fn draws_are_deterministic_and_order_independent() {
        let b = bias(3, 2.0);
        let laws = build_mode_laws(&b, kernels(), 3).unwrap();
        let plan = truncation_plan(kernels(), 3, 3);
        let s1 = draw_sample(&laws, &plan, 99);
        let s2 = draw_sample(&laws, &plan, 99);
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
        let s3 = draw_sample(&laws, &plan, 100);
        assert_ne!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s3).unwrap()
        );
    }

    #[test]
    fn sample_mean_recovers_law_mean() {
        let b = bias(2, 3.0);
        let laws = build_mode_laws(&b, kernels(), 2).unwrap();
        let plan = truncation_plan(kernels(), 2, 2);
        let n_draws = 4000;
        let m_pts = laws.radii.len();
        let mut acc = vec![0.0; m_pts];
        for seed in 0..n_draws {
            let s = draw_sample(&laws, &plan, seed);
            for (a, &c) in acc.iter_mut().zip(&s.coefficients[0][0][0]) {
                *a += c;
            }
        }
        let law = laws.law(1, 0);
        for i in 0..m_pts {
            let mean = acc[i] / n_draws as f64;
            let se = (law.cov[(i, i)] / n_draws as f64).sqrt();
            assert!(
                (mean - law.mean[i]).abs() < 4.0 * se,
                "radius {i}: mean {mean} vs {} (se {se})",
                law.mean[i]
            );
        }
    }

    #[test]
    fn pinned_sample_assembles_to_constant_nu_squared() {
        let sample = pinned_sample(3.0, 2, vec![0.1, 0.2, 0.3]);
        let dir = UnitVector::from_angles(1.0, 2.0);
        let phi = assemble_phi(&sample, &dir).unwrap();
        for v in phi {
            assert_relative_eq!(v, 9.0, epsilon = 1e-12);
        }
        let phi00 = assemble_phi00(&sample);
        for v in phi00 {
            assert_relative_eq!(v, (4.0 * PI).sqrt() * 9.0, epsilon = 1e-10);
        }
        assert_eq!(classify_stationary(&sample, 0.2).unwrap(), StationaryClass::SaddleLike);
    }

    #[test]
    fn single_dipole_coefficient_gives_cos_squared_profile() {
        let mut sample = pinned_sample(1.0, 2, vec![0.5]);
        for per_l in &mut sample.coefficients {
            for per_m in per_l.iter_mut() {
                for coeff in per_m.iter_mut() {
                    coeff[0] = 0.0;
                }
            }
        }
        let c = 0.7;
        sample.coefficients[0][1][1][0] = c;
        for theta in [0.3, 1.1, 2.4] {
            let dir = UnitVector::from_angles(theta, 0.9);
            let phi = assemble_phi(&sample, &dir).unwrap();
            let expect = c * c * 3.0 / (4.0 * PI) * theta.cos().powi(2);
            assert_relative_eq!(phi[0], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn monopole_projection_matches_phi00() {
        let b = bias(2, 2.0);
        let laws = build_mode_laws(&b, kernels(), 2).unwrap();
        let plan = truncation_plan(kernels(), 2, 2);
        let sample = draw_sample(&laws, &plan, 5);
        let proj = project_mode(&sample, 0, 0).unwrap();
        let phi00 = assemble_phi00(&sample);
        for (p, q) in proj.iter().zip(&phi00) {
            assert_relative_eq!(p, q, epsilon = 1e-8, max_relative = 1e-8);
        }
        // Corrected assemblers shift by the documented amounts.
        let dir = UnitVector::from_angles(0.4, 0.1);
        let phi = assemble_phi(&sample, &dir).unwrap();
        let phi_c = assemble_phi_corrected(&sample, &dir).unwrap();
        for ((a, b), &e) in phi.iter().zip(&phi_c).zip(&sample.plan.e_trunc) {
            assert_relative_eq!(b - a, e / (4.0 * PI).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn classification_detects_peaks_and_troughs() {
        let mut low = pinned_sample(3.0, 1, vec![0.1]);
        low.coefficients[0][0][0][0] = (4.0 * PI).sqrt() * 2.0;
        assert_eq!(classify_stationary(&low, 0.1).unwrap(), StationaryClass::PeakLike);
        let mut high = pinned_sample(1.0, 1, vec![0.1]);
        high.coefficients[0][0][0][0] = (4.0 * PI).sqrt() * 2.0;
        assert_eq!(classify_stationary(&high, 0.1).unwrap(), StationaryClass::TroughLike);
    }
}
