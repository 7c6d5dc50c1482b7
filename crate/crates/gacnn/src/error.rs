//! Crate-wide error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not; `op` names the operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-supplied argument violates a precondition.
    #[error("invalid {name}: {message}")]
    Parameter { name: &'static str, message: String },

    /// An internal invariant that callers can trigger (bad index, stale
    /// handle, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Run configuration rejected at load or assembly time.
    #[error("configuration error: {0}")]
    Config(String),

    /// Text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A checkpoint is structurally valid but not one we can read.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// A checkpoint is damaged (truncated, shape mismatch, stray bytes).
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    /// The optimizer hit a non-finite value.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Per-record data problem; `index` locates the offending element.
    #[error("data error at index {index}: {message}")]
    Data { index: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
