use std::path::PathBuf;

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration (non-integral conv output, stripe count too
    /// large, bad hyperparameter, malformed spec, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated, e.g. a backward call received a tape
    /// produced by a different layer kind.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file could not be parsed; always names the offending file.
    #[error("parse error in {file}: {detail}")]
    Parse { file: PathBuf, detail: String },

    /// I/O failure; always names the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A computation produced or encountered a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
