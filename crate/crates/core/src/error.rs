use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(usize),

    #[error("budget parity violation: {0}")]
    Parity(String),

    #[error("budget breach: counted {counted} backward examples, declared {declared} (tolerance {tolerance})")]
    BudgetBreach {
        counted: u64,
        declared: u64,
        tolerance: u64,
    },

    #[error("budget shortfall: counted {counted} backward examples, declared {declared} (tolerance {tolerance})")]
    BudgetShortfall {
        counted: u64,
        declared: u64,
        tolerance: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("end of stream")]
    EndOfStream,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
