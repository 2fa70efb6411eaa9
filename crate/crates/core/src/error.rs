use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input at a given 1-based line of the source file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    /// An operation was called in the wrong order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Degenerate statistic, e.g. a downside deviation with no negative returns.
    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("non-finite value in layer `{layer}` at offset {index}")]
    NonFinite { layer: String, index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
