use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::tensor::TensorError;

/// Top-level error with a stable category for process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Numerical(_) => "numerical",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
        }
    }

    /// 2 for configuration problems, 3 for I/O and data, 4 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Data(_) | Error::Format(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NonSmooth { .. } => Error::Numerical(e.to_string()),
            other => Error::Config(other.to_string()),
        }
    }
}

impl From<CorpusError> for Error {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(source) => Error::Io {
                path: PathBuf::new(),
                source,
            },
            CorpusError::Geometry(m) => Error::Config(m),
            other => Error::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
