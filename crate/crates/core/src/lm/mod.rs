//! Desk-scale decoder-only LM: training, checkpoints, representation
//! extraction and program generation.

mod checkpoint;
mod config;
mod generate;
mod model;
mod represent;
mod train;

use thiserror::Error;

pub use checkpoint::{
    checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LmConfig, MAX_SAMPLE_LEN, MIN_CONTEXT_LEN};
pub use generate::{
    eval_generation_accuracy, generate_program, random_program_accuracy, GenerationSpec,
    MAX_GENERATED_ACTIONS,
};
pub use model::{init_lm, Layout, LmModel, TensorSpec};
pub use represent::{
    extract_dataset, extract_representations, layer_hidden_states, FeatureMatrix,
    RepresentationVector,
};
pub use train::{corpus_loss, train_lm, train_lm_with, LossRecord, TrainRun};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("LM configuration error: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f32 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("malformed generation: {0}")]
    MalformedGeneration(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
