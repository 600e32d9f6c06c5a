//! Brute-force Monte Carlo validators.
//!
//! These sample the conditioned Gaussian fields directly — small point sets
//! through numeric conditioning, 4-dimensional Gaussians for the moment
//! identity, and full mode draws for the cross-covariance structure — so the
//! analytic statistics can be certified without reusing their own algebra.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian_bias::{
    condition, point_partition_first_field, point_partition_other_field, BiasSpec,
};
use crate::harmonics::{angular_quadrature, real_ylm};
use crate::kernels::KernelSet;
use crate::rng::task_rng;
use crate::sampler::{draw_sample, factor_covariance, ModeLawSet, TruncationPlan};

/// Conditioned joint law of all fields at a small point set: the pinned
/// field keeps a mean profile and gradient correction, the remaining `n - 1`
/// fields share a zero-mean law conditioned only on vanishing at the origin.
#[derive(Debug, Clone)]
pub struct PointSetLaw {
    pub n: usize,
    pub first_mean: DVector<f64>,
    pub first_factor: DMatrix<f64>,
    pub other_factor: DMatrix<f64>,
}

impl PointSetLaw {
    pub fn build(bias: &BiasSpec, kernels: &KernelSet, positions: &[[f64; 3]]) -> Result<Self> {
        if positions.len() > 8 {
            return Err(Error::Domain(format!(
                "point-set oracle limited to 8 points, got {}",
                positions.len()
            )));
        }
        let scale = bias.moments.sigma0_sq;
        let part1 = point_partition_first_field(bias, kernels, positions)?;
        let w1 = DVector::from_vec(vec![bias.nu, 0.0, 0.0, 0.0]);
        let (first_mean, first_cov) = condition(&part1, &w1)?;
        let (first_factor, _, _) = factor_covariance(&first_cov, scale)?;
        let part2 = point_partition_other_field(bias, kernels, positions)?;
        let w2 = DVector::from_vec(vec![0.0]);
        let (_, other_cov) = condition(&part2, &w2)?;
        let (other_factor, _, _) = factor_covariance(&other_cov, scale)?;
        Ok(PointSetLaw { n: bias.n, first_mean, first_factor, other_factor })
    }

    /// Draws one realization of `Phi_B` at the point set.
    fn draw_phi<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let q = self.first_mean.len();
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi1 = &self.first_factor * z + &self.first_mean;
        let mut phi = phi1.component_mul(&phi1);
        for _ in 1..self.n {
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let f = &self.other_factor * z;
            phi += f.component_mul(&f);
        }
        phi
    }
}

/// Empirical moments of `Phi_B` at a point set, with standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct McPointStats {
    pub n_draws: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_se: Vec<Vec<f64>>,
}

const DRAW_CHUNK: usize = 4096;

/// Samples `Phi_B` at `positions` `n_draws` times and returns empirical mean
/// and covariance with delta-method standard errors. Two deterministic passes
/// over stream-keyed chunks: the first estimates the mean, the second
/// accumulates centered second and fourth moments.
pub fn mc_biased_point_stats(
    bias: &BiasSpec,
    kernels: &KernelSet,
    positions: &[[f64; 3]],
    n_draws: usize,
    seed: u64,
) -> Result<McPointStats> {
    let law = PointSetLaw::build(bias, kernels, positions)?;
    let q = positions.len();
    let chunks = n_draws.div_ceil(DRAW_CHUNK);
    let draws_in = |chunk: usize| DRAW_CHUNK.min(n_draws - chunk * DRAW_CHUNK);

    let mut mean = DVector::zeros(q);
    for chunk in 0..chunks {
        let mut rng = task_rng(seed, "mc-point-stats", chunk as u64);
        let mut partial = DVector::zeros(q);
        for _ in 0..draws_in(chunk) {
            partial += law.draw_phi(&mut rng);
        }
        mean += partial;
    }
    mean /= n_draws as f64;

    let mut m2 = DMatrix::zeros(q, q);
    let mut m4 = DMatrix::zeros(q, q);
    for chunk in 0..chunks {
        let mut rng = task_rng(seed, "mc-point-stats", chunk as u64);
        let mut p2 = DMatrix::zeros(q, q);
        let mut p4 = DMatrix::zeros(q, q);
        for _ in 0..draws_in(chunk) {
            let centered = law.draw_phi(&mut rng) - &mean;
            for i in 0..q {
                for j in 0..q {
                    let pij = centered[i] * centered[j];
                    p2[(i, j)] += pij;
                    p4[(i, j)] += pij * pij;
                }
            }
        }
        m2 += p2;
        m4 += p4;
    }
    m2 /= n_draws as f64;
    m4 /= n_draws as f64;

    let nf = n_draws as f64;
    let mean_se = (0..q).map(|i| (m2[(i, i)] / nf).sqrt()).collect();
    let cov_se = (0..q)
        .map(|i| {
            (0..q)
                .map(|j| (((m4[(i, j)] - m2[(i, j)].powi(2)).max(0.0)) / nf).sqrt())
                .collect()
        })
        .collect();
    Ok(McPointStats {
        n_draws,
        mean: mean.iter().cloned().collect(),
        mean_se,
        cov: (0..q).map(|i| (0..q).map(|j| m2[(i, j)]).collect()).collect(),
        cov_se,
    })
}

/// Empirical `<X1 X2 X3 X4>` of a 4-dimensional Gaussian, with its standard
/// error, for cross-checking the moment-expansion formula.
pub fn mc_wick4(
    means: &[f64; 4],
    cov: &Matrix4<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cov_dyn = DMatrix::from_fn(4, 4, |i, j| cov[(i, j)]);
    let scale = cov.diagonal().amax().max(1.0);
    let (factor, _, _) = factor_covariance(&cov_dyn, scale)?;
    let mu = Vector4::from_row_slice(means);
    let chunks = n_draws.div_ceil(DRAW_CHUNK);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for chunk in 0..chunks {
        let mut rng = task_rng(seed, "mc-wick4", chunk as u64);
        let mut p1 = 0.0;
        let mut p2 = 0.0;
        let take = DRAW_CHUNK.min(n_draws - chunk * DRAW_CHUNK);
        for _ in 0..take {
            let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &factor * z;
            let prod = (0..4).map(|i| x[i] + mu[i]).product::<f64>();
            p1 += prod;
            p2 += prod * prod;
        }
        sum += p1;
        sum_sq += p2;
    }
    let nf = n_draws as f64;
    let est = sum / nf;
    let var = (sum_sq / nf - est * est).max(0.0);
    Ok((est, (var / nf).sqrt()))
}

/// Empirical cross-covariance matrix of sampled mode amplitudes
/// `Phi_{B,lm}(r)` at one grid radius, for all `(l, m)` with `l <= big_l`.
#[derive(Debug, Clone)]
pub struct ModeDiagonality {
    /// The `(l, m)` pair labelling each row/column.
    pub pairs: Vec<(usize, i64)>,
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_se: DMatrix<f64>,
    pub n_draws: usize,
}

impl ModeDiagonality {
    /// Fraction of off-diagonal covariance entries consistent with zero at
    /// `|z| < 4`.
    pub fn offdiag_fraction_within(&self, z_gate: f64) -> f64 {
        let k = self.pairs.len();
        let mut total = 0usize;
        let mut pass = 0usize;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                total += 1;
                let se = self.cov_se[(i, j)].max(f64::MIN_POSITIVE);
                if (self.cov[(i, j)] / se).abs() < z_gate {
                    pass += 1;
                }
            }
        }
        if total == 0 { 1.0 } else { pass as f64 / total as f64 }
    }
}

/// Draws `n_draws` field samples, projects the assembled `Phi_B` onto every
/// real harmonic with `l <= big_l` at grid radius `radius_index`, and returns
/// the empirical mean and cross-covariance of the mode amplitudes.
pub fn mc_mode_diagonality(
    laws: &ModeLawSet,
    plan: &TruncationPlan,
    radius_index: usize,
    big_l: usize,
    n_draws: usize,
    seed: u64,
) -> Result<ModeDiagonality> {
    if radius_index >= laws.radii.len() {
        return Err(Error::Domain(format!(
            "radius index {radius_index} out of range for grid of {} points",
            laws.radii.len()
        )));
    }
    let l_max = plan.l_max;
    let nodes = angular_quadrature(2 * l_max + 2);
    let mut pairs = Vec::new();
    for l in 0..=big_l {
        for m in -(l as i64)..=l as i64 {
            pairs.push((l, m));
        }
    }
    // Per node: harmonics used for synthesis (all l <= l_max) and the
    // weighted harmonics used for projection (all l <= big_l).
    let mut synth = Vec::with_capacity(nodes.len());
    let mut project = Vec::with_capacity(nodes.len());
    for (dir, w) in &nodes {
        let mut row = Vec::new();
        for l in 0..=l_max {
            for m in -(l as i64)..=l as i64 {
                row.push(real_ylm(l, m, dir)?);
            }
        }
        synth.push(row);
        let prow: Vec<f64> =
            pairs.iter().map(|&(l, m)| Ok(w * real_ylm(l, m, dir)?)).collect::<Result<_>>()?;
        project.push(prow);
    }

    let k = pairs.len();
    let project_draw = |draw_idx: usize| -> DVector<f64> {
        let sample = draw_sample(laws, plan, seed.wrapping_add(draw_idx as u64));
        let mut amps = DVector::zeros(k);
        for (node, prow) in synth.iter().zip(&project) {
            let mut phi = 0.0;
            for per_l in &sample.coefficients {
                let mut field = 0.0;
                let mut idx = 0usize;
                for per_m in per_l {
                    for coeff in per_m {
                        field += coeff[radius_index] * node[idx];
                        idx += 1;
                    }
                }
                phi += field * field;
            }
            for (a, &p) in amps.iter_mut().zip(prow) {
                *a += p * phi;
            }
        }
        amps
    };

    let mut mean = DVector::zeros(k);
    for j in 0..n_draws {
        mean += project_draw(j);
    }
    mean /= n_draws as f64;
    let mut m2 = DMatrix::zeros(k, k);
    let mut m4 = DMatrix::zeros(k, k);
    for j in 0..n_draws {
        let centered = project_draw(j) - &mean;
        for i in 0..k {
            for jj in 0..k {
                let p = centered[i] * centered[jj];
                m2[(i, jj)] += p;
                m4[(i, jj)] += p * p;
            }
        }
    }
    m2 /= n_draws as f64;
    m4 /= n_draws as f64;
    let nf = n_draws as f64;
    let mean_se = DVector::from_fn(k, |i, _| (m2[(i, i)] / nf).sqrt());
    let cov_se =
        DMatrix::from_fn(k, k, |i, j| (((m4[(i, j)] - m2[(i, j)].powi(2)).max(0.0)) / nf).sqrt());
    Ok(ModeDiagonality { pairs, mean, mean_se, cov: m2, cov_se, n_draws })
}

/// One line of a validation report: an empirical statistic, its analytic
/// expectation, and the z-score gate verdict.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub statistic: f64,
    pub expected: f64,
    pub z: f64,
    pub pass: bool,
}

impl ValidationCheck {
    pub fn gated(name: impl Into<String>, statistic: f64, expected: f64, se: f64, z_gate: f64) -> Self {
        let z = if se > 0.0 {
            (statistic - expected) / se
        } else if statistic == expected {
            0.0
        } else {
            f64::INFINITY
        };
        ValidationCheck { name: name.into(), statistic, expected, z, pass: z.abs() < z_gate }
    }
}
