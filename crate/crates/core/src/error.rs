use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("element type mismatch: {0}")]
    ElemMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown object key `{0}`")]
    UnknownKey(String),
    #[error("read [{offset}, {offset}+{length}) out of range for `{key}` ({size} bytes)")]
    OutOfRange {
        key: String,
        offset: u64,
        length: u64,
        size: u64,
    },
    #[error("operation requires the simulated storage backend")]
    NotSimulated,
    #[error("rank-deficient calibration: {0}")]
    RankDeficient(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
