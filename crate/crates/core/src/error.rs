use std::path::PathBuf;

use suffixlab_engine::EngineError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("invalid prompt layout: {0}")]
    Layout(String),
    #[error("surgery mode {0} needs a directional guide")]
    MissingGuide(&'static str),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("unsupported checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
