//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected before any computation ran (bad option,
    /// missing auxiliary data, invalid spec, empty mask, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (NaN samples, non-monotone
    /// times, negative activity, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A time grid is not uniform or exceeds the allowed step size.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A schedule or index refers outside the supported range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Array dimensions do not match.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A computation produced NaN/Inf or otherwise failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation was called without required cached state.
    #[error("state error: {0}")]
    State(String),

    /// A file failed structural validation (magic, version, checksum,
    /// truncation, or internal inconsistency).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Process exit code the CLI maps this error to:
    /// 2 for configuration/input problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
