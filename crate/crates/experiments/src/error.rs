use std::path::PathBuf;

use thiserror::Error;

/// Failure of a run, grouped by the exit status it maps to.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl RunError {
    pub fn config(msg: impl Into<String>) -> Self {
        RunError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Io { .. } => 2,
            RunError::Numeric(_) => 3,
        }
    }
}

impl From<ppd_core::Error> for RunError {
    fn from(e: ppd_core::Error) -> Self {
        use ppd_core::Error as E;
        match e {
            E::Io { path, source } => RunError::Io { path, source },
            E::Numeric(_) | E::InvalidMoments { .. } => RunError::Numeric(e.to_string()),
            other => RunError::Config(other.to_string()),
        }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;
