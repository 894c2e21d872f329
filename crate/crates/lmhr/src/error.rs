//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmhrError {
    /// Tensor shapes do not line up for an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration detected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// NaN/Inf or other numeric breakdown in a forward/backward pass.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed dataset / checkpoint payload.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LmhrError>;

impl LmhrError {
    pub fn shape(msg: impl Into<String>) -> Self {
        LmhrError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        LmhrError::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        LmhrError::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        LmhrError::Format(msg.into())
    }
}
