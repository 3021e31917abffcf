use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor primitive.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward or backward pass produced NaN/Inf.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// backward() called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    /// Unknown primitive name passed to the gradient checker.
    #[error("unknown op `{0}` in gradcheck registry")]
    UnknownOp(String),

    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint encode/decode failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset layout or content problem.
    #[error("dataset: {0}")]
    Dataset(String),

    /// I/O failure with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image encode/decode failure.
    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
