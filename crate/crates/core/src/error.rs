use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),
    /// A file could not be parsed.
    #[error("parse error in {what} at byte {offset}: {message}")]
    Parse {
        what: String,
        offset: usize,
        message: String,
    },
    /// A file parsed but has the wrong magic, version or layout.
    #[error("format error in {what}: {message}")]
    Format { what: String, message: String },
    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Training diverged, a matrix was singular, and similar.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Format { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
