use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value list did not match the element count implied by a shape.
    #[error("tensor data length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// An operation was invoked out of order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { layer: layer.into(), detail: detail.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}
