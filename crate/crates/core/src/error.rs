//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix shapes, naming the operation or graph node.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// A forward pass produced NaN or infinity.
    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An attribute name outside the declared profile schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (singular matrix, non-convergence) with diagnostics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint file is not in the expected format.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Checkpoint is well-formed but incompatible with the current config.
    #[error("checkpoint compatibility error: {0}")]
    CheckpointCompat(String),

    /// A malformed line in an ingested data file.
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
