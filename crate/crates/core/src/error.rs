use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the stack.
///
/// The variants map onto the error classes the CLI reports with distinct exit
/// codes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("batch too small: batch-norm in train mode needs N >= 2, got {0}")]
    BatchTooSmall(usize),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint format error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("usage error: {0}")]
    Usage(String),
}

/// Coarse error class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Format,
    Numeric,
    Data,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Range(_) => ErrorClass::Usage,
            Error::Io { .. } => ErrorClass::Io,
            Error::Format { .. } | Error::Checkpoint { .. } => ErrorClass::Format,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Shape(_) | Error::BatchTooSmall(_) | Error::Split(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
