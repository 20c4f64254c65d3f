use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("elements live on different tori")]
    ParamsMismatch,

    #[error("element is not self-adjoint (residual {residual:.3e})")]
    NotSelfAdjoint { residual: f64 },

    #[error("truncation N = {n} too small: residual {residual:.3e} exceeds {tolerance:.3e}")]
    Truncation { n: usize, residual: f64, tolerance: f64 },

    #[error("heat-fit window violated: t_min = {t_min:.4e} below safe bound {bound:.4e}")]
    WindowViolated { t_min: f64, bound: f64 },

    #[error("fit design matrix ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("non-positive operator: {0}")]
    NonPositive(String),

    #[error("resolvent atom not invertible at the requested point")]
    Invertibility,

    #[error("quadrature did not converge: error estimate {estimate:.3e} above {tolerance:.3e}")]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("spectral tail {tail:.3e} above tolerance {tolerance:.3e} (aliasing)")]
    Aliasing { tail: f64, tolerance: f64 },

    #[error("c = 0 gives the trivial bimodule; use the algebra itself")]
    TrivialBimodule,

    #[error("grid insufficient: {0}")]
    GridInsufficient(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calibration ambiguity: {0}")]
    Calibration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
