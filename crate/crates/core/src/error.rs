use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("problem is not strongly convex (lambda = {0})")]
    NotStronglyConvex(f64),

    #[error("iteration limit {iterations} reached; best gradient norm {best_grad_norm:e}")]
    IterationLimit { iterations: usize, best_grad_norm: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("diverged at epoch {epoch}: objective {value:e}")]
    Diverged { epoch: usize, value: f64 },

    #[error("dimension {dim} exceeds dense limit {limit}")]
    TooLarge { dim: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
