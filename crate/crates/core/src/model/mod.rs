//! Miniature image-language encoder-decoder: vocabulary, network, training
//! loop and checkpoints.

pub mod check;
pub mod checkpoint;
pub mod net;
pub mod train;
pub mod vocab;

use thiserror::Error;

use crate::mixture::ScheduleError;
use crate::nnkernel::KernelError;

pub use check::model_gradcheck;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::{
    forward, generate, per_example_losses, shift_right, Encoded, ForwardOutput, ModelConfig, ModelParams, TextInputs,
};
pub use train::{train, NoHooks, StepRecord, TrainHooks, TrainOptions, TrainState};
pub use vocab::{build_vocab, detokenize, tokenize, Vocab};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("model config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Batch(#[from] ScheduleError),
    #[error("non-finite {what} at step {step} (task {task})")]
    NonFinite { step: usize, task: String, what: String },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("checkpoint version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("{what} fingerprint mismatch: checkpoint has {stored}, data has {actual}")]
    Fingerprint { what: &'static str, stored: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
