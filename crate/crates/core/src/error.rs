use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value lies outside the domain of a function (e.g. log of a non-positive number).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {record}: {detail}")]
    Format { record: String, detail: String },

    /// Bag content unusable for the requested computation.
    #[error("data error in bag {bag}: {detail}")]
    Data { bag: String, detail: String },

    /// Neither enabled modality has any instance in this bag.
    #[error("bag {0} has no instances in any enabled modality; skipped")]
    EmptyBag(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(record: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
