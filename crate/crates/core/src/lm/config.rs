use serde::{Deserialize, Serialize};

use super::LmError;
use crate::corpus::{AUX_LENGTHS, PROGRAM_START};

/// Longest sequence the corpus can produce: specification, 15 actions, EOS.
pub const MAX_SAMPLE_LEN: usize = PROGRAM_START + *AUX_LENGTHS.end() + 1;

/// Smallest accepted `context_len`.
pub const MIN_CONTEXT_LEN: usize = 148;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub context_len: usize,
    pub dropout: f32,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub weight_decay: f32,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub total_tokens: u64,
    /// Optimizer steps between checkpoints; the initial and final parameters
    /// are always checkpointed as well.
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Whether the embedding output joins the layer average used for
    /// representations. Block outputs only by default.
    pub average_includes_embedding: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ff_dim: 512,
            context_len: 160,
            dropout: 0.0,
            learning_rate: 1e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            batch_size: 32,
            total_tokens: 50_000_000,
            checkpoint_interval: 2_000,
            seed: 0,
            average_includes_embedding: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("layers, model_dim, heads and ff_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.context_len < MIN_CONTEXT_LEN {
            return bad(format!(
                "context_len {} is below the minimum of {MIN_CONTEXT_LEN}",
                self.context_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size and checkpoint_interval must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}
