use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The CLI maps these onto exit codes: configuration and contract problems
/// are usage errors, I/O and container problems are I/O errors, and
/// non-finite values are numerical faults.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in record {record:?}: {reason}")]
    Format { record: Option<usize>, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical fault at {location}: {detail}")]
    Numerical { location: String, detail: String },

    #[error("missing: {0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(record: Option<usize>, reason: impl Into<String>) -> Self {
        Error::Format {
            record,
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
