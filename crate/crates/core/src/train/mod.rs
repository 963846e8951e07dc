//! Desk-scale decoder-only transformer trainer.
//!
//! The model, its gradients and the optimizer are written out by hand in 64-bit
//! floats so that every layer's weights stay directly available to the spectral
//! analysis that drives the per-layer learning rates.

mod corpus;
mod forward;
mod model;
mod optim;
mod run;
pub mod tensor;

pub use corpus::{gen_corpus, BatchSampler, CorpusKind, DataConfig, MarkovChain};
pub use forward::{backward, forward_loss, loss_and_grads, Batch, Grads};
pub use model::{build_model, Model, ModelConfig};
pub use optim::{adamw_step, clip_global_norm, AdamState, LrMode, OptimConfig, OptimizerKind, StepStats};
pub use run::{run_many, run_training, RunSpec, TrainRun};

use thiserror::Error;

use crate::allocate::AllocError;
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} positions exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: u64, partial: Box<TrainRun> },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}
