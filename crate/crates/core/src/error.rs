//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while decoding the binary volume/model containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("dimensions overflow: {0}")]
    DimsOverflow(String),
    #[error("unknown style code {0}")]
    UnknownStyle(u8),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/image extents do not line up with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operation was called outside its contract (e.g. backward on a
    /// non-scalar, sgd without gradients).
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf reached a value that must stay finite.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
