//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operation shape disagreement. Carries both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input failed a precondition (non-normalized distribution, bad config value, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// API called in a state it does not support (stepping a done episode,
    /// double backward, missing reward history, desynchronized expert state, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// NaN/Inf detected where finite values are required.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("checkpoint: unsupported format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint: truncated payload (expected {expected} bytes, found {found})")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("checkpoint: manifest entry `{name}` out of payload bounds or overlapping")]
    CheckpointManifest { name: String },

    #[error("checkpoint: architecture descriptor mismatch: {0}")]
    CheckpointArch(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
