use thiserror::Error;

/// Errors raised by the numeric, routing, and training layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid routing decision: {0}")]
    InvalidDecision(String),

    #[error("stale routing cache: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T> = std::result::Result<T, MorError>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> MorError {
    MorError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
