//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds model capacity {max_positions}")]
    CapacityExceeded { len: usize, max_positions: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("KL divergence undefined: q is zero at token {token} where p is positive")]
    DivergenceUndefined { token: usize },

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("migration undefined: mapped tokens carry zero source probability mass")]
    MigrationUndefined,

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt artifact: {0}")]
    Corruption(String),

    #[error("unsupported artifact format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("malformed plan (line {line}): {msg}")]
    PlanParse { line: usize, msg: String },

    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
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

pub type Result<T> = std::result::Result<T, Error>;
