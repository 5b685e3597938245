//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward called on a stale graph; re-run forward first")]
    StaleGraph,

    #[error("batch too small: need at least {need} examples, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("all activations dropped by mask; reduce k or p")]
    AllDropped,

    #[error("config error in field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {detail}")]
    Parse { context: String, detail: String },
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
