use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports. Depletion of a generation is not an
/// error and never shows up here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Validity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("inadmissible size: {0}")]
    Admissibility(String),
    #[error("missing model for node {node}: {reason}")]
    MissingModel { node: String, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
