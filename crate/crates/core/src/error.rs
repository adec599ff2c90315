//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, target id, gallery index, …) is out of range.
    #[error("{what}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A forward pass, gradient, or optimizer step produced or received
    /// a NaN/Inf where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration file or field rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Text that should match a known layout did not parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Network-level failure talking to the LLM endpoint. `retryable`
    /// distinguishes transient transport faults from protocol errors.
    #[error("transport error (retryable: {retryable}): {message}")]
    Transport { message: String, retryable: bool },

    /// The mock LLM cannot produce a QA pair for this caption; callers
    /// skip the record with a warning instead of aborting the corpus.
    #[error("caption unsuitable for {kind} generation: {reason}")]
    UnsuitableCaption { kind: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
