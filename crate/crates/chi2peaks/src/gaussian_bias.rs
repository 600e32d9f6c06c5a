//! Gaussian conditioning and the biased statistics of the component fields.
//!
//! The bias pins `phi^1(0) = nu`, `grad phi^1(0) = 0`, and `phi^a(0) = 0` for
//! `a > 1`. Because all fields are Gaussian, every biased law is an ordinary
//! multivariate-normal conditioning, computed here either in closed form
//! (pointwise and per spherical-harmonic mode) or numerically via
//! [`condition`] on an explicit block partition. The numeric route exists so
//! the closed forms can be cross-checked; the partition builders are public
//! for that reason and for the Monte Carlo oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix4};

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::spectrum::SpectralMoments;

/// Condition-number ceiling for the constraint block.
const COND_LIMIT: f64 = 1e12;

/// The conditioning data: `n` component fields, amplitude `nu` for the first
/// field at the origin, and the spectral moments that normalize it.
#[derive(Clone, Copy, Debug)]
pub struct BiasSpec {
    pub n: usize,
    pub nu: f64,
    pub nubar: f64,
    pub moments: SpectralMoments,
}

impl BiasSpec {
    pub fn from_nu(n: usize, nu: f64, moments: SpectralMoments) -> Result<Self> {
        if n < 1 {
            return Err(Error::Domain("need at least one component field".into()));
        }
        if nu == 0.0 {
            return Err(Error::ZeroAmplitude);
        }
        if !(nu > 0.0 && nu.is_finite()) {
            // The amplitude constraint is always rotated to its positive root.
            return Err(Error::Domain(format!("amplitude nu must be positive, got {nu}")));
        }
        Ok(Self { n, nu, nubar: nu / moments.sigma0_sq.sqrt(), moments })
    }

    pub fn from_nubar(n: usize, nubar: f64, moments: SpectralMoments) -> Result<Self> {
        Self::from_nu(n, nubar * moments.sigma0_sq.sqrt(), moments)
    }

    pub fn sigma0(&self) -> f64 {
        self.moments.sigma0_sq.sqrt()
    }

    fn check_alpha(&self, alpha: usize) -> Result<()> {
        if alpha == 0 || alpha > self.n {
            return Err(Error::Domain(format!(
                "field index alpha must lie in 1..={}, got {alpha}",
                self.n
            )));
        }
        Ok(())
    }
}

/// A jointly Gaussian vector split into a free block (1) and a constrained
/// block (2), with `S21 = S12^T` implied.
#[derive(Clone, Debug)]
pub struct GaussianPartition {
    pub mu1: DVector<f64>,
    pub mu2: DVector<f64>,
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s22: DMatrix<f64>,
}

/// Law of block 1 given block 2 fixed at `fixed_w2`:
/// `mean = mu1 - S12 S22^-1 (mu2 - w2)`, `cov = S11 - S12 S22^-1 S21`.
pub fn condition(part: &GaussianPartition, fixed_w2: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = part.mu1.len();
    let p = part.mu2.len();
    if part.s11.shape() != (q, q)
        || part.s12.shape() != (q, p)
        || part.s22.shape() != (p, p)
        || fixed_w2.len() != p
    {
        return Err(Error::Domain("inconsistent partition dimensions".into()));
    }

    let eigen = part.s22.clone().symmetric_eigen();
    let lam_max = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lam_min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(lam_max > 0.0) {
        return Err(Error::SingularConstraint { cond: f64::INFINITY });
    }
    let cond = if lam_min <= 0.0 { f64::INFINITY } else { lam_max / lam_min };
    if cond > COND_LIMIT {
        return Err(Error::SingularConstraint { cond });
    }

    // Solve S22 X = S21 and S22 y = (mu2 - w2); fall back to a tiny jitter if
    // roundoff pushes a near-singular block past Cholesky.
    let solve = |jitter: f64| -> Option<(DMatrix<f64>, DVector<f64>)> {
        let mut s22 = part.s22.clone();
        for i in 0..p {
            s22[(i, i)] += jitter;
        }
        let chol = s22.cholesky()?;
        Some((chol.solve(&part.s12.transpose()), chol.solve(&(&part.mu2 - fixed_w2))))
    };
    let (x, y) = solve(0.0)
        .or_else(|| solve(1e-12 * part.s22.trace()))
        .ok_or(Error::SingularConstraint { cond })?;

    let mean = &part.mu1 - &part.s12 * y;
    let mut cov = &part.s11 - &part.s12 * x;
    // Symmetrize against roundoff.
    let covt = cov.transpose();
    cov = (cov + covt) * 0.5;
    Ok((mean, cov))
}

/// Biased mean of `phi^alpha(r)`: only the pinned field keeps a profile.
pub fn biased_phi_mean(bias: &BiasSpec, kernels: &KernelSet, alpha: usize, r: f64) -> Result<f64> {
    bias.check_alpha(alpha)?;
    if alpha != 1 {
        return Ok(0.0);
    }
    Ok(bias.nubar / bias.sigma0() * kernels.c(r)?)
}

/// Biased covariance of `phi^alpha(r_vec)` and `phi^beta(r_vec')` for points at
/// radii `r`, `rp` subtending `cos_gamma` at the origin.
pub fn biased_phi_cov(
    bias: &BiasSpec,
    kernels: &KernelSet,
    alpha: usize,
    beta: usize,
    r: f64,
    rp: f64,
    cos_gamma: f64,
) -> Result<f64> {
    bias.check_alpha(alpha)?;
    bias.check_alpha(beta)?;
    if cos_gamma.abs() > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("cos(gamma) = {cos_gamma} outside [-1, 1]")));
    }
    if alpha != beta {
        return Ok(0.0);
    }
    let cg = cos_gamma.clamp(-1.0, 1.0);
    let delta = (r * r + rp * rp - 2.0 * r * rp * cg).max(0.0).sqrt();
    let m = bias.moments;
    let mut cov = kernels.c(delta)? - kernels.c(r)? * kernels.c(rp)? / m.sigma0_sq;
    if alpha == 1 {
        cov -= 3.0 * kernels.d(r)? * kernels.d(rp)? * cg / m.sigma1_sq;
    }
    Ok(cov)
}

/// Biased mean of the real spherical-harmonic coefficient `phi^alpha_lm(r)`:
/// only the monopole of the pinned field is shifted.
pub fn biased_mode_mean(
    bias: &BiasSpec,
    kernels: &KernelSet,
    alpha: usize,
    l: usize,
    m: i64,
    r: f64,
) -> Result<f64> {
    bias.check_alpha(alpha)?;
    if alpha != 1 || l != 0 || m != 0 {
        return Ok(0.0);
    }
    Ok((4.0 * PI).sqrt() * bias.nubar / bias.sigma0() * kernels.c(r)?)
}

/// Biased covariance of `phi^alpha_lm(r)` and `phi^alpha_lm(r')`; diagonal in
/// `(alpha, l, m)` and independent of `m`.
pub fn biased_mode_cov(
    bias: &BiasSpec,
    kernels: &KernelSet,
    alpha: usize,
    l: usize,
    r: f64,
    rp: f64,
) -> Result<f64> {
    bias.check_alpha(alpha)?;
    let m = bias.moments;
    let mut v = kernels.ctilde(l, r, rp)?;
    if l == 0 {
        v -= kernels.c(r)? * kernels.c(rp)? / m.sigma0_sq;
    }
    if alpha == 1 && l == 1 {
        v -= kernels.d(r)? * kernels.d(rp)? / m.sigma1_sq;
    }
    Ok(4.0 * PI * v)
}

/// Non-central 4-point function `<X1 X2 X3 X4>` of a jointly Gaussian vector:
/// three covariance pairings, six mean-pair terms, and the product of means.
pub fn wick4(means: &[f64; 4], cov: &Matrix4<f64>) -> f64 {
    let m = means;
    let c = |i: usize, j: usize| cov[(i, j)];
    c(0, 1) * c(2, 3) + c(0, 2) * c(1, 3) + c(0, 3) * c(1, 2)
        + m[0] * m[1] * c(2, 3)
        + m[0] * m[2] * c(1, 3)
        + m[0] * m[3] * c(1, 2)
        + m[1] * m[2] * c(0, 3)
        + m[1] * m[3] * c(0, 2)
        + m[2] * m[3] * c(0, 1)
        + m[0] * m[1] * m[2] * m[3]
}

/// Unconditioned joint law of the pinned field at `positions` (block 1)
/// together with its origin constraints `(phi(0), grad phi(0))` (block 2).
/// Conditioning block 2 on `(nu, 0, 0, 0)` realizes the bias numerically.
pub fn point_partition_first_field(
    bias: &BiasSpec,
    kernels: &KernelSet,
    positions: &[[f64; 3]],
) -> Result<GaussianPartition> {
    let q = positions.len();
    let m = bias.moments;
    let mut s11 = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let d = dist(&positions[i], &positions[j]);
            let v = kernels.c(d)?;
            s11[(i, j)] = v;
            s11[(j, i)] = v;
        }
    }
    // Cov(phi(x), d_i phi(0)) = D(|x|) x_i / |x|.
    let mut s12 = DMatrix::zeros(q, 4);
    for (i, p) in positions.iter().enumerate() {
        let r = norm(p);
        s12[(i, 0)] = kernels.c(r)?;
        if r > 0.0 {
            let d = kernels.d(r)?;
            for k in 0..3 {
                s12[(i, 1 + k)] = d * p[k] / r;
            }
        }
    }
    let mut s22 = DMatrix::zeros(4, 4);
    s22[(0, 0)] = m.sigma0_sq;
    for k in 1..4 {
        s22[(k, k)] = m.sigma1_sq / 3.0;
    }
    Ok(GaussianPartition {
        mu1: DVector::zeros(q),
        mu2: DVector::zeros(4),
        s11,
        s12,
        s22,
    })
}

/// As [`point_partition_first_field`] but for a field with `alpha > 1`, whose
/// only constraint is vanishing at the origin.
pub fn point_partition_other_field(
    bias: &BiasSpec,
    kernels: &KernelSet,
    positions: &[[f64; 3]],
) -> Result<GaussianPartition> {
    let q = positions.len();
    let mut s11 = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let v = kernels.c(dist(&positions[i], &positions[j]))?;
            s11[(i, j)] = v;
            s11[(j, i)] = v;
        }
    }
    let mut s12 = DMatrix::zeros(q, 1);
    for (i, p) in positions.iter().enumerate() {
        s12[(i, 0)] = kernels.c(norm(p))?;
    }
    let mut s22 = DMatrix::zeros(1, 1);
    s22[(0, 0)] = bias.moments.sigma0_sq;
    Ok(GaussianPartition {
        mu1: DVector::zeros(q),
        mu2: DVector::zeros(1),
        s11,
        s12,
        s22,
    })
}

/// Unconditioned joint law of the mode coefficient `phi^1_lm` at two radii
/// (block 1) and the origin constraint that biases it (block 2), for
/// `l in {0, 1}`. The `l = 0` constraint is the coefficient itself at the
/// origin; the `l = 1` constraint is its radial derivative there (the
/// gradient). Used to cross-check the closed-form mode covariance.
pub fn mode_partition_first_field(
    bias: &BiasSpec,
    kernels: &KernelSet,
    l: usize,
    r: f64,
    rp: f64,
) -> Result<GaussianPartition> {
    assert!(l <= 1, "only the biased multipoles l = 0, 1 have constraints");
    let m = bias.moments;
    let fp = 4.0 * PI;
    let mut s11 = DMatrix::zeros(2, 2);
    let radii = [r, rp];
    for i in 0..2 {
        for j in i..2 {
            let v = fp * kernels.ctilde(l, radii[i], radii[j]).unwrap();
            s11[(i, j)] = v;
            s11[(j, i)] = v;
        }
    }
    let mut s12 = DMatrix::zeros(2, 1);
    let mut s22 = DMatrix::zeros(1, 1);
    if l == 0 {
        for i in 0..2 {
            s12[(i, 0)] = fp * kernels.c(radii[i])?;
        }
        s22[(0, 0)] = fp * m.sigma0_sq;
    } else {
        // d/dr' of 4 pi Ctilde_1(r, r') at r' = 0 is (4 pi / 3) D(r), and the
        // derivative variance is 4 pi sigma_1^2 / 9.
        for i in 0..2 {
            s12[(i, 0)] = fp * kernels.d(radii[i])? / 3.0;
        }
        s22[(0, 0)] = fp * m.sigma1_sq / 9.0;
    }
    Ok(GaussianPartition {
        mu1: DVector::zeros(2),
        mu2: DVector::zeros(1),
        s11,
        s12,
        s22,
    })
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_kernel_set, RadialGrid};
    use crate::spectrum::PowerSpectrum;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp_setup(n: usize, nubar: f64) -> (BiasSpec, KernelSet) {
        let spec = PowerSpectrum::exponential_unit_variance(8.0).unwrap();
        let grid = RadialGrid::uniform(0.5, 10).unwrap();
        let kernels = build_kernel_set(&spec, &grid, 2).unwrap();
        let bias = BiasSpec::from_nubar(n, nubar, kernels.moments()).unwrap();
        (bias, kernels)
    }

    #[test]
    fn scalar_schur_complement() {
        let rho = 0.6;
        let part = GaussianPartition {
            mu1: DVector::from_element(1, 0.0),
            mu2: DVector::from_element(1, 0.0),
            s11: DMatrix::from_element(1, 1, 1.0),
            s12: DMatrix::from_element(1, 1, rho),
            s22: DMatrix::from_element(1, 1, 1.0),
        };
        let w2 = DVector::from_element(1, 2.0);
        let (mean, cov) = condition(&part, &w2).unwrap();
        assert_relative_eq!(mean[0], 1.2, max_relative = 1e-14);
        assert_relative_eq!(cov[(0, 0)], 1.0 - rho * rho, max_relative = 1e-14);
    }

    #[test]
    fn conditioning_on_the_mean_shifts_nothing() {
        let part = GaussianPartition {
            mu1: DVector::from_vec(vec![3.0, -1.0]),
            mu2: DVector::from_vec(vec![0.5]),
            s11: DMatrix::identity(2, 2),
            s12: DMatrix::from_vec(2, 1, vec![0.4, 0.1]),
            s22: DMatrix::from_element(1, 1, 2.0),
        };
        let (mean, _) = condition(&part, &part.mu2.clone()).unwrap();
        assert_relative_eq!(mean[0], 3.0, max_relative = 1e-14);
        assert_relative_eq!(mean[1], -1.0, max_relative = 1e-14);

        let indep = GaussianPartition { s12: DMatrix::zeros(2, 1), ..part };
        let (_, cov) = condition(&indep, &DVector::from_element(1, 7.0)).unwrap();
        assert_eq!(cov, DMatrix::identity(2, 2));
    }

    #[test]
    fn ill_conditioned_constraint_rejected() {
        let part = GaussianPartition {
            mu1: DVector::zeros(1),
            mu2: DVector::zeros(2),
            s11: DMatrix::identity(1, 1),
            s12: DMatrix::zeros(1, 2),
            s22: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-15]),
        };
        match condition(&part, &DVector::zeros(2)) {
            Err(Error::SingularConstraint { .. }) => {}
            other => panic!("expected SingularConstraint, got {other:?}"),
        }
    }

    #[test]
    fn zero_amplitude_rejected() {
        let m = SpectralMoments { sigma0_sq: 1.0, sigma1_sq: 3.0 };
        assert!(matches!(BiasSpec::from_nu(5, 0.0, m), Err(Error::ZeroAmplitude)));
        assert!(BiasSpec::from_nu(5, -1.0, m).is_err());
        assert!(BiasSpec::from_nu(0, 1.0, m).is_err());
    }

    #[test]
    fn biased_point_mean_examples() {
        let (bias, kernels) = exp_setup(5, 3.0);
        assert_relative_eq!(biased_phi_mean(&bias, &kernels, 1, 0.0).unwrap(), bias.nu, max_relative = 1e-10);
        assert_eq!(biased_phi_mean(&bias, &kernels, 2, 0.3).unwrap(), 0.0);
        assert_abs_diff_eq!(biased_phi_mean(&bias, &kernels, 1, 0.125).unwrap(), 0.75, epsilon = 1e-7);
    }

    #[test]
    fn biased_point_cov_examples() {
        let (bias, kernels) = exp_setup(5, 3.0);
        // Pinned at the origin: no residual covariance with the origin value.
        assert_abs_diff_eq!(
            biased_phi_cov(&bias, &kernels, 1, 1, 0.3, 0.0, 1.0).unwrap(),
            0.0,
            epsilon = 1e-9
        );
        assert_eq!(biased_phi_cov(&bias, &kernels, 1, 2, 0.3, 0.3, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            biased_phi_cov(&bias, &kernels, 1, 1, 0.125, 0.125, 1.0).unwrap(),
            0.875,
            epsilon = 1e-7
        );
    }

    #[test]
    fn biased_mode_mean_examples() {
        let (bias, kernels) = exp_setup(5, 3.0);
        assert_relative_eq!(
            biased_mode_mean(&bias, &kernels, 1, 0, 0, 1e-9).unwrap(),
            (4.0 * PI).sqrt() * bias.nu,
            max_relative = 1e-6
        );
        assert_eq!(biased_mode_mean(&bias, &kernels, 1, 1, 0, 0.2).unwrap(), 0.0);
        assert_eq!(biased_mode_mean(&bias, &kernels, 2, 0, 0, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn biased_mode_cov_examples() {
        let (bias, kernels) = exp_setup(5, 3.0);
        // l = 0 towards the origin: variance is eaten by the constraint.
        assert_abs_diff_eq!(
            biased_mode_cov(&bias, &kernels, 1, 0, 0.3, 0.0).unwrap(),
            0.0,
            epsilon = 1e-8
        );
        // l >= 2 is untouched by the bias.
        assert_relative_eq!(
            biased_mode_cov(&bias, &kernels, 1, 2, 0.3, 0.2).unwrap(),
            4.0 * PI * kernels.ctilde(2, 0.3, 0.2).unwrap(),
            max_relative = 1e-12
        );
        // Monochromatic degeneracy: the gradient constraint exhausts l = 1.
        let mono = PowerSpectrum::monochromatic(8.0, 1.0).unwrap();
        let grid = RadialGrid::uniform(0.5, 10).unwrap();
        let kern = build_kernel_set(&mono, &grid, 2).unwrap();
        let b = BiasSpec::from_nubar(5, 3.0, kern.moments()).unwrap();
        for &r in &[0.1, 0.25, 0.4] {
            assert_abs_diff_eq!(biased_mode_cov(&b, &kern, 1, 1, r, r).unwrap(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn point_closed_forms_match_numeric_conditioning() {
        let (bias, kernels) = exp_setup(5, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let r = rng.gen_range(0.01..0.5);
            let rp = rng.gen_range(0.01..0.5);
            let cg: f64 = rng.gen_range(-1.0..1.0);
            let sg = (1.0 - cg * cg).sqrt();
            let pts = [[0.0, 0.0, r], [rp * sg, 0.0, rp * cg]];

            // Pinned field: constraints (phi(0), grad phi(0)) = (nu, 0).
            let part = point_partition_first_field(&bias, &kernels, &pts).unwrap();
            let w2 = DVector::from_vec(vec![bias.nu, 0.0, 0.0, 0.0]);
            let (mean, cov) = condition(&part, &w2).unwrap();
            assert_abs_diff_eq!(mean[0], biased_phi_mean(&bias, &kernels, 1, r).unwrap(), epsilon = 1e-10);
            assert_abs_diff_eq!(mean[1], biased_phi_mean(&bias, &kernels, 1, rp).unwrap(), epsilon = 1e-10);
            assert_abs_diff_eq!(
                cov[(0, 1)],
                biased_phi_cov(&bias, &kernels, 1, 1, r, rp, cg).unwrap(),
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(
                cov[(0, 0)],
                biased_phi_cov(&bias, &kernels, 1, 1, r, r, 1.0).unwrap(),
                epsilon = 1e-10
            );

            // Unpinned field: single zero constraint at the origin.
            let part = point_partition_other_field(&bias, &kernels, &pts).unwrap();
            let (mean, cov) = condition(&part, &DVector::zeros(1)).unwrap();
            assert_abs_diff_eq!(mean[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                cov[(0, 1)],
                biased_phi_cov(&bias, &kernels, 2, 2, r, rp, cg).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn mode_closed_forms_match_numeric_conditioning() {
        let (bias, kernels) = exp_setup(5, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..100 {
            let r = rng.gen_range(0.01..0.5);
            let rp = rng.gen_range(0.01..0.5);
            for l in 0..=1usize {
                let part = mode_partition_first_field(&bias, &kernels, l, r, rp).unwrap();
                let w2 = if l == 0 {
                    DVector::from_element(1, (4.0 * PI).sqrt() * bias.nu)
                } else {
                    DVector::zeros(1)
                };
                let (mean, cov) = condition(&part, &w2).unwrap();
                assert_abs_diff_eq!(
                    mean[0],
                    biased_mode_mean(&bias, &kernels, 1, l, 0, r).unwrap(),
                    epsilon = 1e-9
                );
                assert_abs_diff_eq!(
                    cov[(0, 1)],
                    biased_mode_cov(&bias, &kernels, 1, l, r, rp).unwrap(),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn biased_variance_nonnegative_on_grid() {
        let (bias, kernels) = exp_setup(5, 3.0);
        for &r in kernels.grid().radii().to_vec().iter() {
            for alpha in [1, 2] {
                let v = biased_phi_cov(&bias, &kernels, alpha, alpha, r, r, 1.0).unwrap();
                assert!(v >= -1e-12, "variance {v} negative at r = {r}, alpha = {alpha}");
            }
        }
    }

    #[test]
    fn wick4_examples() {
        // Independent squares: <X^2 Y^2> = 1.
        let mut cov = Matrix4::zeros();
        cov[(0, 1)] = 1.0;
        cov[(1, 0)] = 1.0;
        cov[(2, 3)] = 1.0;
        cov[(3, 2)] = 1.0;
        assert_eq!(wick4(&[0.0; 4], &cov), 1.0);
        // <X^4> = 3 for standard normal.
        assert_eq!(wick4(&[0.0; 4], &Matrix4::from_element(1.0)), 3.0);
        // Deterministic product of means.
        assert_eq!(wick4(&[1.0; 4], &Matrix4::zeros()), 1.0);
    }
}
