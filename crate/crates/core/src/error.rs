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
    #[error("line {line}: malformed example: {message}")]
    Malformed { line: usize, message: String },
    #[error("example {id}: {message}")]
    InvalidExample { id: String, message: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("reference must have at least {needed} tokens, got {got}")]
    ReferenceTooShort { needed: usize, got: usize },
    #[error("sentence index {index} out of range for document with {len} sentences")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sequence length {len} exceeds max positions {max}")]
    TooManyPositions { len: usize, max: usize },
    #[error("group tag {tag} exceeds max tag {max}")]
    TagOverflow { tag: u32, max: usize },
    #[error("prefix tags are inconsistent with the group tags of its tokens")]
    InconsistentTags,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint {expected}, supplied {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
