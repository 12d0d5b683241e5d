use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Factorization or eigensolver failure. The message carries whatever
    /// conditioning diagnostics were available when it happened.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid predictive moments: mean={mean}, variance={variance}")]
    InvalidMoments { mean: f64, variance: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{path}: row {row}, column '{column}': {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
