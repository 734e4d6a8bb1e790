use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line count mismatch: {files} have {counts:?} lines")]
    LineCountMismatch { files: String, counts: Vec<usize> },

    #[error("{file}:{line}: {tokens} tokens but {tags} tags")]
    ArityMismatch {
        file: String,
        line: usize,
        tokens: usize,
        tags: usize,
    },

    #[error("malformed tag {tag:?}")]
    MalformedTag { tag: String },

    #[error("unknown split {0:?} (expected train, dev or test)")]
    UnknownSplit(String),

    #[error("length mismatch for utterance {id}: gold {gold}, predicted {pred}")]
    LengthMismatch { id: usize, gold: usize, pred: usize },

    #[error("{what} id {id} out of range (size {size})")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("bench: {0}")]
    Bench(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or files (as opposed to usage
    /// or numeric failures).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
