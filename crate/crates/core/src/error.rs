use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("cache corruption: {0}")]
    CacheCorruption(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("cache is empty")]
    EmptyCache,

    #[error("budget infeasible: L_max = {budget} < first frame ({first}) + current frame ({current}) tokens")]
    BudgetInfeasible {
        budget: usize,
        first: usize,
        current: usize,
    },

    #[error("corrupt quantized data: {0}")]
    Corruption(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
