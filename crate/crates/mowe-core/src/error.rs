//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MoweError>;

#[derive(Debug, Error)]
pub enum MoweError {
    /// Incompatible tensor shapes for an operation. Names both shapes.
    #[error("{op}: shape {lhs:?} incompatible with {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    /// Training aborted on a non-finite value; names the first offending tensor.
    #[error("non-finite value at step {step} in tensor `{node}`")]
    NonFinite { step: usize, node: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed dataset or checkpoint file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
}

impl MoweError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MoweError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MoweError::Config(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        MoweError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        MoweError::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
