//! Character-level decoder-only transformer used as both teacher and student.

mod checkpoint;
mod model;
mod sampling;
mod vocab;

pub use checkpoint::{sha256_hex, MAGIC};
pub use model::{Forward, ModelConfig, ModelRole, SequenceLogProbs, TinyLM};
pub use sampling::{
    apply_penalties, draw, nucleus_distribution, step_distribution, SamplingParams,
    GREEDY_TEMPERATURE,
};
pub use vocab::{TokenId, Vocab};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("character {0:?} is not in the vocabulary")]
    Encoding(char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("sequence of length {len} exceeds context {max}")]
    Context { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("continuation must be non-empty")]
    EmptyContinuation,
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;
