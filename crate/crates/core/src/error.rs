use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or an invalid dimension argument.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward op produced NaN or infinity.
    #[error("numerical error: op `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this tape; record a new one")]
    TapeReplayed,

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint contents do not fit the configured model.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// A metric or statistic has no defined value for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
