//! Supervised probes that read latent state features off frozen LM
//! representations.
//!
//! A probe maps one representation vector to four categorical heads: robot
//! row, robot column, facing direction and whether the facing cell is
//! blocked. Accuracy is reported per head and as the fraction of items on
//! which all four heads are right.

mod network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::LatentLabel;

pub use network::{predictions_from_logits, ProbeModel};

/// Output sizes of the row, col, dir and blocked heads.
pub const HEAD_SIZES: [usize; 4] = [8, 8, 4, 2];
pub const HEAD_NAMES: [&str; 4] = ["row", "col", "dir", "facing_blocked"];
pub const NUM_OUTPUTS: usize = 22;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe dataset is empty")]
    EmptyDataset,
    #[error("probe training diverged at step {step}")]
    Divergence { step: u64 },
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("feature/label mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeArchitecture {
    Linear,
    Mlp1,
    Mlp2,
}

impl ProbeArchitecture {
    pub const ALL: [ProbeArchitecture; 3] = [
        ProbeArchitecture::Linear,
        ProbeArchitecture::Mlp1,
        ProbeArchitecture::Mlp2,
    ];

    pub fn hidden_dims(self) -> &'static [usize] {
        match self {
            ProbeArchitecture::Linear => &[],
            ProbeArchitecture::Mlp1 => &[256],
            ProbeArchitecture::Mlp2 => &[256, 1024],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeArchitecture::Linear => "linear",
            ProbeArchitecture::Mlp1 => "mlp1",
            ProbeArchitecture::Mlp2 => "mlp2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for ProbeArchitecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub architecture: ProbeArchitecture,
    pub dropout: f32,
    pub weight_decay: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            architecture: ProbeArchitecture::Mlp2,
            dropout: 0.2,
            weight_decay: 1e-4,
            learning_rate: 0.01,
            batch_size: 256,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Learning-rate milestones as fractions of `steps`.
    pub const LR_MILESTONES: [f32; 2] = [0.75, 0.9];
    pub const LR_GAMMA: f32 = 0.1;

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ProbeError::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ProbeError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ProbeError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Class indices of the four heads.
pub fn encode_label(label: &LatentLabel) -> [usize; 4] {
    [
        label.row,
        label.col,
        label.dir.index(),
        label.facing_blocked as usize,
    ]
}

/// Rows of a feature table paired with their labels. `rows` selects which
/// rows of `features`/`labels` take part.
#[derive(Clone, Copy, Debug)]
pub struct ProbeData<'a> {
    pub dim: usize,
    pub features: &'a [f32],
    pub labels: &'a [LatentLabel],
    pub rows: &'a [usize],
}

impl<'a> ProbeData<'a> {
    pub fn check(&self) -> Result<(), ProbeError> {
        if self.rows.is_empty() {
            return Err(ProbeError::EmptyDataset);
        }
        if self.dim == 0 || self.features.len() != self.labels.len() * self.dim {
            return Err(ProbeError::Mismatch(format!(
                "{} feature values for {} labels at dim {}",
                self.features.len(),
                self.labels.len(),
                self.dim
            )));
        }
        if let Some(&r) = self.rows.iter().find(|&&r| r >= self.labels.len()) {
            return Err(ProbeError::Mismatch(format!("row {r} out of range")));
        }
        Ok(())
    }

    pub fn feature(&self, row: usize) -> &'a [f32] {
        &self.features[row * self.dim..(row + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracies {
    pub row: f64,
    pub col: f64,
    pub dir: f64,
    pub facing_blocked: f64,
}

impl HeadAccuracies {
    pub fn as_array(&self) -> [f64; 4] {
        [self.row, self.col, self.dir, self.facing_blocked]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub per_head: HeadAccuracies,
    /// Fraction of items with all four heads correct.
    pub aggregate: f64,
    pub n: usize,
    pub split: String,
}

/// Per-item correctness of each head.
pub fn head_correctness(predictions: &[[usize; 4]], data: &ProbeData) -> Vec<[bool; 4]> {
    predictions
        .iter()
        .zip(data.rows)
        .map(|(p, &r)| {
            let t = encode_label(&data.labels[r]);
            [p[0] == t[0], p[1] == t[1], p[2] == t[2], p[3] == t[3]]
        })
        .collect()
}

pub fn summarize(correct: &[[bool; 4]], split: &str) -> ProbeAccuracy {
    let n = correct.len();
    let mut heads = [0usize; 4];
    let mut all = 0usize;
    for c in correct {
        for h in 0..4 {
            heads[h] += c[h] as usize;
        }
        all += c.iter().all(|&b| b) as usize;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    ProbeAccuracy {
        per_head: HeadAccuracies {
            row: frac(heads[0]),
            col: frac(heads[1]),
            dir: frac(heads[2]),
            facing_blocked: frac(heads[3]),
        },
        aggregate: frac(all),
        n,
        split: split.to_string(),
    }
}

pub fn train_probe(data: &ProbeData, config: &ProbeConfig) -> Result<ProbeModel, ProbeError> {
    ProbeModel::train(data, config)
}

pub fn eval_probe(
    probe: &ProbeModel,
    data: &ProbeData,
    split: &str,
) -> Result<ProbeAccuracy, ProbeError> {
    data.check()?;
    let predictions = probe.predict(data)?;
    Ok(summarize(&head_correctness(&predictions, data), split))
}

/// Serialized probe result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub architecture: ProbeArchitecture,
    pub checkpoint_step: u64,
    pub calibration_split: String,
    pub measurement_split: String,
    pub semantics_train: String,
    pub semantics_probe: String,
    pub per_head: HeadAccuracies,
    pub aggregate: f64,
    pub n: usize,
}
