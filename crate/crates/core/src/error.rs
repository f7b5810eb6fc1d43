use thiserror::Error;

/// Errors produced anywhere in the fusion stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by backward; record a fresh tape")]
    TapeSpent,

    #[error("tape is in inference mode and recorded nothing to replay")]
    TapeInference,

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("bad tensor format: {0}")]
    BadTensorFormat(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
