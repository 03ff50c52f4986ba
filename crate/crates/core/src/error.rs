use thiserror::Error;

/// Errors produced by model construction, fitting, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance not positive definite: {0}")]
    KernelNotPositiveDefinite(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("non-finite objective at iteration {iter} ({term})")]
    NonFiniteObjective { iter: usize, term: String },

    #[error("malformed matrix file header: {0}")]
    MalformedHeader(String),

    #[error("matrix file size mismatch: {0}")]
    SizeMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
