use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape violation; the message carries every offending shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed corpus data, with the 1-based line number when known.
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted because a gradient went non-finite.
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
