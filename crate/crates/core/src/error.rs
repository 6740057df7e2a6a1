use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A pipeline spec violated a structural invariant.
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),

    /// A trace or tree violated a structural invariant.
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of range or missing.
    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint bytes could not be read back.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A model was used before the required training stage.
    #[error("model not fitted: {0}")]
    NotFitted(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
