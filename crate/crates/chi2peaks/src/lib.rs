//! Analytic statistics and samplers for isotropic chi-square random fields
//! conditioned on a stationary point of fixed amplitude at the origin.
//!
//! The field is `Phi = sum_a (phi^a)^2` over `n` independent, identically
//! distributed Gaussian component fields. Conditioning `phi^1(0) = nu`,
//! `grad phi^1(0) = 0`, and `phi^a(0) = 0` for `a > 1` pins a stationary
//! point of `Phi` at the origin with `Phi(0) = nu^2`. Everything downstream
//! (radial profiles, spherical-harmonic mode statistics, biased sampling)
//! follows from Gaussian conditioning of the component fields.

pub mod chi2stats;
pub mod cli;
pub mod error;
pub mod gaussian_bias;
pub mod harmonics;
pub mod kernels;
pub mod mc_oracle;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod spectrum;

pub use error::{Error, Result};
