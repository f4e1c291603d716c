use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected record {id}: {reason}")]
    RejectedRecord { id: String, reason: String },
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("gradient check aborted, loss is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("gaussian process fit failed: {0}")]
    GpFit(String),
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
