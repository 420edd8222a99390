use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("vocabulary mismatch: model has {model} tokens, tokenizer has {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
