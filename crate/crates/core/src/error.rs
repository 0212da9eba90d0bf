use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bandwidth diverges at t = 0; use the closed-form t -> 0 limit")]
    DivergentBandwidth,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },

    #[error("vMF kernel requires unit-norm inputs (norm {norm})")]
    NormError { norm: f64 },

    #[error("invalid input: {0}")]
    InputError(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive-definite")]
    NotPositiveDefinite,

    #[error("integrator exceeded {max_steps} steps")]
    StepLimit { max_steps: usize },

    #[error("non-finite state at t = {t}")]
    NumericalBlowup { t: f64 },

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("rejection sampler stalled (acceptance {acceptance:.3e})")]
    SamplerStall { acceptance: f64 },

    #[error("covariance is singular; use a positive ridge")]
    SingularCovariance,

    #[error("format error: {0}")]
    FormatError(String),

    #[error("data error: {0}")]
    DataError(String),

    #[error("table has no data rows (columns: {columns:?})")]
    EmptyTable { columns: Vec<String> },

    #[error("sample size too small: need at least {min}, got {got}")]
    SizeError { min: usize, got: usize },

    #[error("all points identical; no pairwise scale")]
    DegenerateScale,

    #[error("log of non-positive value {0}")]
    LogDomainError(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures as opposed to configuration or input problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepLimit { .. }
                | Error::NumericalBlowup { .. }
                | Error::SamplerStall { .. }
                | Error::SingularCovariance
                | Error::DegenerateScale
                | Error::LogDomainError(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
