use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm running statistics are uninitialized")]
    UninitializedStatistics,

    #[error("label {label} is not in the class set of a {head} head")]
    LabelOutOfHead { label: String, head: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
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
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
