use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering: {0}")]
    EmptyDataset(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("mainstream score undefined: {0}")]
    UndefinedScore(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this failure class: 2 configuration, 3 data/IO,
    /// 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Incompatible(_) | Error::Sequencing(_) => 2,
            Error::Parse { .. }
            | Error::EmptyDataset(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::UndefinedScore(_) => 3,
            Error::Dimension(_) | Error::Diverged(_) | Error::Numeric(_) => 4,
        }
    }
}
