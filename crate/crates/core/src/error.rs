use crate::langmodel::LmError;
use crate::numerics::NumericsError;

/// Errors raised by training, probing, preference and pipeline code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error("optimizer step requested without gradients")]
    MissingGradients,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("snapshot does not match the model: {0}")]
    SnapshotMismatch(String),
    #[error("data hygiene violation: {0}")]
    Overlap(String),
    #[error("teacher pretraining gate failed: {0}")]
    GateFailure(String),
    #[error("generation did not terminate: {0}")]
    NonTermination(String),
    #[error("no preference pairs could be built in iteration {0}; teacher left unchanged")]
    NoPreferences(usize),
    #[error("artifact corrupted: {0}")]
    Corrupt(String),
    #[error("missing artifact: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
