use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("vocabulary {vocab}: {msg}")]
    Vocab { vocab: String, msg: String },

    #[error("vocabulary {vocab}: no token covers character {ch:?} at position {position}")]
    Uncoverable {
        vocab: String,
        position: usize,
        ch: char,
    },

    #[error("token id {id} out of range for vocabulary {vocab} of size {size}")]
    OutOfRange { vocab: String, id: u32, size: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("brute-force pairing limited to 6x6, got {src}x{tgt}")]
    TooLarge { src: usize, tgt: usize },

    #[error("non-finite value in sinkhorn scaling at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sequence {seq}: {source}")]
    AtSequence {
        seq: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_sequence(self, seq: usize) -> Self {
        Error::AtSequence {
            seq,
            source: Box::new(self),
        }
    }
}
