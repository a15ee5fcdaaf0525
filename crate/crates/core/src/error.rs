use thiserror::Error;

pub type Result<T> = std::result::Result<T, BeaError>;

#[derive(Debug, Error)]
pub enum BeaError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A metric is mathematically undefined for the given input
    /// (e.g. uncertainty error without both correct and incorrect detections).
    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BeaError {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        BeaError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
