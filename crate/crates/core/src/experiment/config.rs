use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::gridworld::{Action, SemanticsMap, WorldConfig};
use crate::lm::LmConfig;
use crate::probes::{ProbeArchitecture, ProbeConfig};

/// A semantics either by id (`identity`, `cycle3`, `perm:20134`, ...) or as
/// an explicit token → executed-action table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SemanticsSpec {
    Id(String),
    Table(BTreeMap<String, String>),
}

impl SemanticsSpec {
    pub fn resolve(&self) -> Result<SemanticsMap, ExperimentError> {
        match self {
            SemanticsSpec::Id(id) => {
                SemanticsMap::from_id(id).map_err(|e| ExperimentError::Config(e.to_string()))
            }
            SemanticsSpec::Table(table) => {
                let mut mapping = Action::ALL;
                for (token, action) in table {
                    let t = Action::from_name(token).ok_or_else(|| {
                        ExperimentError::Config(format!("unknown action `{token}`"))
                    })?;
                    let a = Action::from_name(action).ok_or_else(|| {
                        ExperimentError::Config(format!("unknown action `{action}`"))
                    })?;
                    mapping[t.index()] = a;
                }
                SemanticsMap::from_mapping(mapping)
                    .map_err(|e| ExperimentError::Config(e.to_string()))
            }
        }
    }
}

impl From<&str> for SemanticsSpec {
    fn from(id: &str) -> Self {
        SemanticsSpec::Id(id.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbePlan {
    pub architectures: Vec<ProbeArchitecture>,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub dropout: f32,
    /// Probes per cell, averaged. Seeds are shared by the `M` and `M'`
    /// label conditions.
    pub seeds: usize,
}

impl Default for ProbePlan {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            architectures: ProbeArchitecture::ALL.to_vec(),
            steps: p.steps,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            dropout: p.dropout,
            seeds: 3,
        }
    }
}

impl ProbePlan {
    pub fn config(&self, architecture: ProbeArchitecture) -> ProbeConfig {
        ProbeConfig {
            architecture,
            dropout: self.dropout,
            weight_decay: self.weight_decay,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Semantics the main LM is trained on.
    pub target: SemanticsSpec,
    /// Baseline semantics `M'` to mediate against.
    pub baselines: Vec<SemanticsSpec>,
    /// Baselines for which a second LM is trained on `M'` to check the
    /// valid-baseline inequalities empirically.
    pub baseline_lms: Vec<SemanticsSpec>,
    pub world: WorldConfig,
    pub train_samples: usize,
    pub aux_samples: usize,
    pub heldout_specs: usize,
    pub random_program_draws: usize,
    /// Generation accuracy must exceed this multiple of the random-program
    /// baseline.
    pub generation_threshold_factor: f64,
    pub lm: LmConfig,
    pub probe: ProbePlan,
    /// Probe every `probe_stride`-th saved checkpoint of the target LM (the
    /// final one always). Baseline LMs are probed at their final checkpoint.
    pub probe_stride: usize,
    pub bootstrap_resamples: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target: "identity".into(),
            baselines: vec![
                "cycle3".into(),
                "swap_move_turn_left".into(),
                "swap_turn_right_turn_left".into(),
            ],
            baseline_lms: vec!["cycle3".into()],
            world: WorldConfig::default(),
            train_samples: 100_000,
            aux_samples: 50_000,
            heldout_specs: 500,
            random_program_draws: 20,
            generation_threshold_factor: 10.0,
            lm: LmConfig::default(),
            probe: ProbePlan::default(),
            probe_stride: 1,
            bootstrap_resamples: 1000,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// The semantics of an experiment, resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedSemantics {
    pub target: SemanticsMap,
    pub baselines: Vec<SemanticsMap>,
    pub baseline_lms: Vec<SemanticsMap>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<ResolvedSemantics, ExperimentError> {
        let cfg_err = |m: String| Err(ExperimentError::Config(m));
        let target = self.target.resolve()?;
        let baselines = self
            .baselines
            .iter()
            .map(|b| b.resolve())
            .collect::<Result<Vec<_>, _>>()?;
        let baseline_lms = self
            .baseline_lms
            .iter()
            .map(|b| b.resolve())
            .collect::<Result<Vec<_>, _>>()?;
        if baselines.is_empty() {
            return cfg_err("at least one baseline is required".into());
        }
        for b in &baseline_lms {
            if !baselines.contains(b) {
                return cfg_err(format!("baseline LM {} is not among the baselines", b.id()));
            }
        }
        let mut ids: Vec<String> = baselines.iter().map(|b| b.id()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != baselines.len() {
            return cfg_err("duplicate baselines".into());
        }
        self.world
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.lm
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.train_samples == 0 || self.aux_samples == 0 || self.heldout_specs == 0 {
            return cfg_err("train_samples, aux_samples and heldout_specs must be positive".into());
        }
        if self.probe_stride == 0 {
            return cfg_err("probe_stride must be positive".into());
        }
        if self.probe.architectures.is_empty() || self.probe.seeds == 0 {
            return cfg_err("probe plan needs at least one architecture and one seed".into());
        }
        for &a in &self.probe.architectures {
            self.probe
                .config(a)
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if !(self.generation_threshold_factor.is_finite() && self.generation_threshold_factor > 0.0)
        {
            return cfg_err("generation_threshold_factor must be positive".into());
        }
        Ok(ResolvedSemantics {
            target,
            baselines,
            baseline_lms,
        })
    }

    /// The configuration with command-line overrides applied.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        baselines: &[String],
        archs: &[ProbeArchitecture],
    ) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if !baselines.is_empty() {
            self.baselines = baselines
                .iter()
                .map(|b| SemanticsSpec::Id(b.clone()))
                .collect();
            let keep: Vec<SemanticsSpec> = self
                .baseline_lms
                .iter()
                .filter(|b| self.baselines.contains(b))
                .cloned()
                .collect();
            self.baseline_lms = keep;
        }
        if !archs.is_empty() {
            self.probe.architectures = archs.to_vec();
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let r = ExperimentConfig::default().validate().unwrap();
        assert_eq!(r.baselines.len(), 3);
        assert_eq!(r.baseline_lms, vec![SemanticsMap::cycle3()]);
    }

    #[test]
    fn tables_must_be_bijective() {
        let json = r#"{"baselines": [{"move": "turn_left", "turn_left": "turn_left"}], "baseline_lms": []}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
        let json =
            r#"{"baselines": [{"move": "turn_left", "turn_left": "move"}], "baseline_lms": []}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            cfg.validate().unwrap().baselines[0],
            SemanticsMap::swap(Action::Move, Action::TurnLeft)
        );
    }

    #[test]
    fn unknown_ids_are_config_errors() {
        let cfg = ExperimentConfig {
            baselines: vec!["perm:00123".into()],
            baseline_lms: vec![],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
    }
}
