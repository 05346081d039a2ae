use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("integration failed at t={t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: format version {found} is not supported (expected {expected}); re-save with a matching build", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt { path: path.into(), reason: reason.into() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Numeric(_) | Error::Integration { .. } => 3,
            Error::Io { .. } | Error::Corrupt { .. } | Error::Version { .. } => 4,
        }
    }
}

macro_rules! bail_arg {
    ($($t:tt)*) => { return Err($crate::error::Error::Argument(format!($($t)*))) };
}
pub(crate) use bail_arg;
