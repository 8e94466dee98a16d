use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume shapes do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument or configuration value is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An API was used outside its contract (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A quantity is mathematically undefined for the given input.
    #[error("undefined value: {0}")]
    Undefined(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A binary file could not be decoded.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A test-set sample would be used for training or model selection.
    #[error("data leakage: {0}")]
    Leakage(String),

    /// A cross-validation fold failed; `source` says why.
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// The underlying error, looking through fold wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
