use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    /// Every position was excluded from a masked loss.
    #[error("degenerate batch: no position contributes to {0}")]
    DegenerateBatch(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
