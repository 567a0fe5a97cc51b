use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by corpus IO, configuration, decoding and training.
///
/// Shape and contract violations inside the numeric kernels panic with a
/// descriptive message instead; they indicate caller bugs, not runtime
/// conditions a pipeline can recover from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("alphabet error: {0}")]
    Alphabet(String),

    #[error("input too short for stream {stream}: {message}")]
    InputTooShort { stream: usize, message: String },

    #[error("utterance join error: {0}")]
    Join(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
