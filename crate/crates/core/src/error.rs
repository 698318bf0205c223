use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A non-finite value was produced at the named computation node.
    #[error("non-finite value at `{node}`")]
    NumericOverflow { node: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("bad magic in {what}: expected `{expected}`")]
    BadMagic {
        what: &'static str,
        expected: &'static str,
    },

    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u8 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite entry in row {row}")]
    NonFinite { row: usize },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("malformed {what}: {message}")]
    Malformed { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(node: impl Into<String>) -> Self {
        Error::NumericOverflow { node: node.into() }
    }

    /// True for numeric failures (as opposed to input or configuration problems).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericOverflow { .. })
    }
}
