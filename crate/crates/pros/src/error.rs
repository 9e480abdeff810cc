use std::path::{Path, PathBuf};

use pros_core::ProsError;

/// Failures of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Precondition(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Precondition(_) | Error::Io { .. } | Error::Format { .. } => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }
}

impl From<ProsError> for Error {
    fn from(e: ProsError) -> Self {
        match e {
            ProsError::InvalidConfig(_) => Error::Config(e.to_string()),
            _ if e.is_numeric() => Error::Numeric(e.to_string()),
            _ => Error::Precondition(e.to_string()),
        }
    }
}
