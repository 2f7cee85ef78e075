use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit-code classes: `Dimension`, `Config` and
/// `Validation` are caller mistakes, `NonFinite` and `Numerical` are runtime
/// failures, and `Format` / `Io` come from the filesystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error in {file} at byte {offset}: {message}")]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for this error class: 1 configuration/validation,
    /// 2 runtime/numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Config(_) | Error::Validation(_) => 1,
            Error::NonFinite(_) | Error::Numerical(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
        }
    }
}
