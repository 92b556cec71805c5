use std::path::PathBuf;

use crate::embedding::EmbeddingError;
use crate::encoder::EncoderError;
use crate::event_data::EventDataError;
use crate::numerics::NumericsError;
use crate::sequence::SequenceError;

/// Error type of the training, evaluation and experiment layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    EventData(#[from] EventDataError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("no available labels in batch")]
    NoLabels,
    #[error("empty dataset: {0}")]
    EmptyData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
