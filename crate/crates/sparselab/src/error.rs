use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite {what} at step {step}; aborting")]
    NonFinite { what: &'static str, step: u64 },

    #[error("need at least {needed} points to fit {family}, got {got}")]
    InsufficientPoints {
        family: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("corpus not found at {0}")]
    MissingCorpus(PathBuf),

    #[error("malformed checkpoint file: {0}")]
    CheckpointFormat(String),

    #[error("malformed {kind} input: {detail}")]
    Parse { kind: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
