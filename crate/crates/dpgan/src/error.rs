use std::path::PathBuf;

/// Errors raised by the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dpgan_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), offset, message: message.into() }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    /// Process exit code: 2 for configuration errors, 3 for numeric
    /// failures, 4 for I/O and file-format problems.
    pub fn exit_code(&self) -> i32 {
        use dpgan_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Core(e) => match e.root() {
                C::Numeric { .. } => 3,
                _ => 2,
            },
        }
    }
}
