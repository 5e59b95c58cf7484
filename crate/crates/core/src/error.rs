use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file does not follow the expected layout (missing property, bad magic, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A file parsed but holds values that violate an invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A caller passed inconsistent or out-of-range arguments.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The requested operation needs state that is not there (e.g. untrained features).
    #[error("invalid state: {0}")]
    State(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! argument_error {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
macro_rules! format_error {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
macro_rules! data_error {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use argument_error;
pub(crate) use data_error;
pub(crate) use format_error;
