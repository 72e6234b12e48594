//! The captioning model: tokenizer, parameters, forward graph, training,
//! gradient checking, beam search and checkpoints.

pub mod beam;
pub mod checkpoint;
mod config;
pub mod gradcheck;
pub mod network;
mod params;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

use thiserror::Error;

pub use beam::{beam_search, greedy_decode, BeamConfig, ModelScorer, NextTokenScorer};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use network::{
    decoder_forward, encode_neighbors, lift_visual, loss, loss_and_grads, perceiver_resample, DecodeMode, Example,
    NeighborEncoding,
};
pub use params::{FreezePolicy, ModelParams, ParamGroup, ParamId, ParamSpec};
pub use tensor::Tensor;
pub use train::{train, Adam, LogRecord, TrainConfig, TrainOutcome, TrainingPair};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {0} outside the vocabulary")]
    InvalidTokenId(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("{got} neighbors supplied, model accepts at most {max}")]
    TooManyNeighbors { got: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint format: {0}")]
    FormatVersionMismatch(String),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt checkpoint at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
}

impl ModelError {
    /// Errors caused by unreadable or damaged checkpoint files.
    pub fn is_format_error(&self) -> bool {
        matches!(self, Self::FormatVersionMismatch(_) | Self::ChecksumMismatch { .. } | Self::Corrupt { .. })
    }
}
