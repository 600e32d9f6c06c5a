use thiserror::Error;

/// Errors produced by the analytic and sampling machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-integrable spectrum: {0}")]
    NonIntegrableSpectrum(String),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("quadrature failed to converge (achieved {achieved:e}, requested {requested:e}) for {context}")]
    QuadratureNonConvergence {
        context: String,
        achieved: f64,
        requested: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "nu = 0 is rejected: the zero-amplitude constraint degenerates; \
         use a tiny nubar (e.g. 1e-8) to approach the nu -> 0 limit"
    )]
    ZeroAmplitude,

    #[error("singular constraint: S22 condition number {cond:e} exceeds 1e12")]
    SingularConstraint { cond: f64 },

    #[error("covariance not PSD: eigenvalue {eigenvalue:e} below clip threshold {threshold:e} (lambda_max {lambda_max:e})")]
    NotPositiveSemiDefinite {
        eigenvalue: f64,
        threshold: f64,
        lambda_max: f64,
    },

    #[error("non-monotone correlation rho_C on the search bracket; sharply peaked \
             (e.g. monochromatic) spectra have oscillatory correlations and no \
             well-defined r_alpha")]
    NonMonotoneCorrelation,

    #[error("root not bracketed in (0, {rmax}] for {context}")]
    RootNotBracketed { context: String, rmax: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
