use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ResolvedSemantics};
use super::report::{self, GenerationSummary, Summary};
use super::store::{self, hash_json};
use super::ExperimentError;
use crate::causal::{
    bootstrap_accuracy, bootstrap_difference, nie_bounds, probe_scores, split_name,
    AccuracyQuadruple, MediationReport, ProbeTable, QuadrantSpec, Scores,
};
use crate::corpus::{
    decode_grid, generate_auxiliary_dataset, generate_training_corpus, load_dataset,
    persist_dataset, Dataset, SplitRole, SCHEMA_VERSION, TRAIN_LENGTHS, VOCAB_VERSION,
};
use crate::gridworld::{SemanticsMap, NUM_CELLS};
use crate::lm::{
    eval_generation_accuracy, extract_dataset, init_lm, random_program_accuracy, read_checkpoint,
    train_lm_with, write_checkpoint, FeatureMatrix, GenerationSpec, LmConfig, LmError, LmModel,
};
use crate::probes::{ProbeArchitecture, ProbeRecord};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainLm,
    Extract,
    ProbeQuadrants,
    Mediate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::TrainLm,
        Stage::Extract,
        Stage::ProbeQuadrants,
        Stage::Mediate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainLm => "train-lm",
            Stage::Extract => "extract",
            Stage::ProbeQuadrants => "probe-quadrants",
            Stage::Mediate => "mediate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        match name {
            "probe" => Some(Stage::ProbeQuadrants),
            _ => Self::ALL.into_iter().find(|s| s.name() == name),
        }
    }
}

impl Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    /// At least one artifact was (re)computed.
    Executed,
    /// Every artifact was already up to date.
    Skipped,
}

/// One mediated measurement: a baseline, checkpoint, probe architecture and
/// quadrant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationRecord {
    pub baseline: String,
    pub checkpoint_step: u64,
    pub architecture: ProbeArchitecture,
    pub quadrant: QuadrantSpec,
    pub report: MediationReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub stages: Vec<(Stage, StageOutcome)>,
    pub summary: Summary,
    pub mediation: Vec<MediationRecord>,
}

/// Runs every stage of `config` and loads the results.
pub fn run_mediation_experiment(
    config: ExperimentConfig,
) -> Result<ExperimentResults, ExperimentError> {
    let pipeline = Pipeline::new(config)?;
    let stages = pipeline.run_all()?;
    Ok(ExperimentResults {
        stages,
        summary: pipeline.summary()?,
        mediation: pipeline.mediation_records()?,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointList {
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct QuadrantScores {
    quadrant: QuadrantSpec,
    scores: Scores,
}

/// Probe results for one (LM, checkpoint, auxiliary semantics, architecture).
#[derive(Serialize, Deserialize)]
struct ProbeCell {
    quadrants: Vec<QuadrantScores>,
    records: Vec<ProbeRecord>,
}

impl ProbeCell {
    fn scores(&self, q: QuadrantSpec) -> Result<&Scores, ExperimentError> {
        self.quadrants
            .iter()
            .find(|s| s.quadrant == q)
            .map(|s| &s.scores)
            .ok_or_else(|| {
                ExperimentError::MissingResults(format!("probe cell lacks quadrant {}", q.id()))
            })
    }
}

/// Representations to extract: which LM, at which checkpoint, over which
/// auxiliary dataset.
#[derive(Clone, Debug, PartialEq)]
struct FeatureCell {
    lm: SemanticsMap,
    step: u64,
    aux: SemanticsMap,
}

struct StageRun {
    stage: Stage,
    outputs: BTreeMap<String, String>,
    executed: bool,
}

fn stage_err<E: Display>(stage: Stage) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage: stage.name(),
        message: e.to_string(),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Semantics id usable in a file name.
fn path_id(s: &SemanticsMap) -> String {
    s.id().replace(':', "-")
}

/// The stages of one experiment over one run directory.
pub struct Pipeline {
    config: ExperimentConfig,
    semantics: ResolvedSemantics,
    root: PathBuf,
    quiet: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        let semantics = config.validate()?;
        let root = config.out_dir.clone();
        Ok(Self {
            config,
            semantics,
            root,
            quiet: false,
        })
    }

    /// Suppresses progress messages on stderr.
    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>, ExperimentError> {
        Stage::ALL
            .iter()
            .map(|&s| Ok((s, self.run_stage(s)?)))
            .collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, ExperimentError> {
        let mut run = StageRun {
            stage,
            outputs: BTreeMap::new(),
            executed: false,
        };
        match stage {
            Stage::GenData => self.gen_data(&mut run)?,
            Stage::TrainLm => self.train_lms(&mut run)?,
            Stage::Extract => self.extract(&mut run)?,
            Stage::ProbeQuadrants => self.probe(&mut run)?,
            Stage::Mediate => self.mediate(&mut run)?,
            Stage::Report => self.report(&mut run)?,
        }
        let stamp = self
            .root
            .join("stamps")
            .join(format!("{}.json", stage.name()));
        if run.executed || !stamp.exists() {
            let bytes = serde_json::to_vec_pretty(
                &serde_json::json!({ "stage": stage.name(), "outputs": run.outputs }),
            )
            .map_err(stage_err(stage))?;
            store::write_atomic(&stamp, &bytes).map_err(io_err(&stamp))?;
        }
        if !run.executed {
            self.note(stage, "up to date");
        }
        Ok(if run.executed {
            StageOutcome::Executed
        } else {
            StageOutcome::Skipped
        })
    }

    /// The final summary written by the report stage.
    pub fn summary(&self) -> Result<Summary, ExperimentError> {
        self.read_json(&self.root.join("report/summary.json"))
    }

    /// Generation accuracy of every LM, as written by the train-lm stage.
    pub fn generation(&self) -> Result<Vec<GenerationSummary>, ExperimentError> {
        self.lm_semantics()
            .iter()
            .map(|s| self.read_json(&self.lm_dir(s).join("generation.json")))
            .collect()
    }

    pub fn mediation_records(&self) -> Result<Vec<MediationRecord>, ExperimentError> {
        self.read_json(&self.mediation_path())
    }

    fn note(&self, stage: Stage, message: impl Display) {
        if !self.quiet {
            eprintln!("[{stage}] {message}");
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn record(&self, run: &mut StageRun, path: &Path, key: &str) {
        run.outputs.insert(self.rel(path), key.to_string());
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T, ExperimentError> {
        if !path.exists() {
            return Err(ExperimentError::MissingResults(self.rel(path)));
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| ExperimentError::MissingResults(format!("{}: {e}", self.rel(path))))
    }

    fn write_json<T: Serialize>(
        &self,
        stage: Stage,
        path: &Path,
        value: &T,
        key: &str,
    ) -> Result<(), ExperimentError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(stage_err(stage))?;
        bytes.push(b'\n');
        self.write_marked(path, &bytes, key)
    }

    fn write_marked(&self, path: &Path, bytes: &[u8], key: &str) -> Result<(), ExperimentError> {
        store::unmark(path).map_err(io_err(path))?;
        store::write_atomic(path, bytes).map_err(io_err(path))?;
        store::mark(path, key).map_err(io_err(path))
    }

    /// An upstream artifact, which must be present and current.
    fn require(&self, path: &Path, key: &str) -> Result<(), ExperimentError> {
        if store::is_fresh(path, key) {
            Ok(())
        } else {
            Err(ExperimentError::MissingResults(format!(
                "{} is missing or out of date; run the earlier stages first",
                self.rel(path)
            )))
        }
    }

    fn master(&self, tag: &str, index: u64) -> u64 {
        seed::derive(self.config.seed, tag, index)
    }

    fn probe_seeds(&self) -> Vec<u64> {
        (0..self.config.probe.seeds as u64)
            .map(|k| self.master("experiment/probe", k))
            .collect()
    }

    // Which semantics get an LM, and which an auxiliary dataset.

    fn lm_semantics(&self) -> Vec<SemanticsMap> {
        let mut v = vec![self.semantics.target];
        v.extend(self.semantics.baseline_lms.iter().copied());
        v
    }

    fn aux_semantics(&self) -> Vec<SemanticsMap> {
        let mut v = vec![self.semantics.target];
        v.extend(
            self.semantics
                .baselines
                .iter()
                .filter(|b| **b != self.semantics.target)
                .copied(),
        );
        v
    }

    // Paths.

    fn train_path(&self, s: &SemanticsMap) -> PathBuf {
        self.root.join(format!("data/train_{}.jsonl", path_id(s)))
    }

    fn heldout_path(&self, s: &SemanticsMap) -> PathBuf {
        self.root.join(format!("data/heldout_{}.jsonl", path_id(s)))
    }

    fn aux_path(&self, s: &SemanticsMap) -> PathBuf {
        self.root.join(format!("data/aux_{}.jsonl", path_id(s)))
    }

    fn lm_dir(&self, s: &SemanticsMap) -> PathBuf {
        self.root.join("lm").join(path_id(s))
    }

    fn checkpoint_path(&self, s: &SemanticsMap, step: u64) -> PathBuf {
        self.lm_dir(s).join(format!("step_{step:08}.ckpt"))
    }

    fn features_path(&self, c: &FeatureCell) -> PathBuf {
        self.root.join(format!(
            "features/{}/step_{:08}/{}.bin",
            path_id(&c.lm),
            c.step,
            path_id(&c.aux)
        ))
    }

    fn probe_path(&self, c: &FeatureCell, arch: ProbeArchitecture) -> PathBuf {
        self.root.join(format!(
            "probes/{}/step_{:08}/{}/{}.json",
            path_id(&c.lm),
            c.step,
            path_id(&c.aux),
            arch.name()
        ))
    }

    fn mediation_path(&self) -> PathBuf {
        self.root.join("mediation/reports.json")
    }

    // Keys. Each is a hash of the configuration that determines the artifact
    // and of the keys of the artifacts it is computed from.

    fn train_key(&self, s: &SemanticsMap) -> String {
        let c = &self.config;
        hash_json(&(
            "train",
            self.master("experiment/train", 0),
            c.train_samples,
            s.id(),
            c.world,
            SCHEMA_VERSION,
            VOCAB_VERSION,
        ))
    }

    fn heldout_key(&self, s: &SemanticsMap) -> String {
        let c = &self.config;
        hash_json(&(
            "heldout",
            self.master("experiment/heldout", 0),
            c.heldout_specs,
            self.train_key(s),
        ))
    }

    fn aux_key(&self, s: &SemanticsMap) -> String {
        let c = &self.config;
        hash_json(&(
            "aux",
            self.master("experiment/aux", 0),
            c.aux_samples,
            s.id(),
            c.world,
            SCHEMA_VERSION,
            VOCAB_VERSION,
        ))
    }

    /// Both LMs share the initialization and data-order seed, so they differ
    /// only in the semantics of their corpus.
    fn lm_config(&self) -> LmConfig {
        LmConfig {
            seed: self.master("experiment/lm", self.config.lm.seed),
            ..self.config.lm.clone()
        }
    }

    fn lm_key(&self, s: &SemanticsMap) -> String {
        hash_json(&("lm", self.train_key(s), self.lm_config()))
    }

    fn checkpoint_key(&self, s: &SemanticsMap, step: u64) -> String {
        hash_json(&("checkpoint", self.lm_key(s), step))
    }

    fn generation_key(&self, s: &SemanticsMap, steps: &[u64]) -> Result<String, ExperimentError> {
        let c = &self.config;
        Ok(hash_json(&(
            "generation",
            self.lm_key(s),
            self.heldout_key(s),
            steps,
            c.random_program_draws,
            c.generation_threshold_factor,
            self.master("experiment/random-programs", 0),
        )))
    }

    fn features_key(&self, c: &FeatureCell) -> String {
        hash_json(&(
            "features",
            self.checkpoint_key(&c.lm, c.step),
            self.aux_key(&c.aux),
        ))
    }

    fn probe_key(&self, c: &FeatureCell, arch: ProbeArchitecture) -> String {
        hash_json(&(
            "probe",
            self.features_key(c),
            self.config.probe.config(arch),
            self.probe_seeds(),
        ))
    }

    // Checkpoint selection.

    fn checkpoint_steps(&self, s: &SemanticsMap) -> Result<Vec<u64>, ExperimentError> {
        let path = self.lm_dir(s).join("checkpoints.json");
        self.require(&path, &self.lm_key(s))?;
        let list: CheckpointList = self.read_json(&path)?;
        if list.steps.is_empty() {
            return Err(ExperimentError::MissingResults(format!(
                "{} lists no checkpoints",
                self.rel(&path)
            )));
        }
        Ok(list.steps)
    }

    /// Checkpoints of the target LM that are probed: every `probe_stride`-th
    /// and the last.
    fn probed_steps(&self) -> Result<Vec<u64>, ExperimentError> {
        let steps = self.checkpoint_steps(&self.semantics.target)?;
        let last = steps.len() - 1;
        Ok(steps
            .iter()
            .enumerate()
            .filter(|(i, _)| i % self.config.probe_stride == 0 || *i == last)
            .map(|(_, &s)| s)
            .collect())
    }

    fn final_step(&self, s: &SemanticsMap) -> Result<u64, ExperimentError> {
        Ok(*self.checkpoint_steps(s)?.last().expect("checked non-empty"))
    }

    /// Steps at which an LM is evaluated for generation: the probed steps for
    /// the target, the final step for baseline LMs.
    fn generation_steps(&self, s: &SemanticsMap) -> Result<Vec<u64>, ExperimentError> {
        if *s == self.semantics.target {
            self.probed_steps()
        } else {
            Ok(vec![self.final_step(s)?])
        }
    }

    fn feature_cells(&self) -> Result<Vec<FeatureCell>, ExperimentError> {
        let target = self.semantics.target;
        let mut cells = Vec::new();
        for step in self.probed_steps()? {
            for aux in self.aux_semantics() {
                cells.push(FeatureCell {
                    lm: target,
                    step,
                    aux,
                });
            }
        }
        for b in &self.semantics.baseline_lms {
            let step = self.final_step(b)?;
            for aux in [target, *b] {
                cells.push(FeatureCell { lm: *b, step, aux });
            }
        }
        Ok(cells)
    }

    fn load_dataset_checked(
        &self,
        path: &Path,
        key: &str,
        stage: Stage,
    ) -> Result<Dataset, ExperimentError> {
        self.require(path, key)?;
        load_dataset(path).map_err(stage_err(stage))
    }

    fn load_model(
        &self,
        s: &SemanticsMap,
        step: u64,
        stage: Stage,
    ) -> Result<LmModel, ExperimentError> {
        let path = self.checkpoint_path(s, step);
        self.require(&path, &self.checkpoint_key(s, step))?;
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        read_checkpoint(std::io::BufReader::new(file)).map_err(stage_err(stage))
    }

    // Stages.

    fn gen_data(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        let c = &self.config;
        for s in self.lm_semantics() {
            let path = self.train_path(&s);
            let key = self.train_key(&s);
            let mut train = None;
            if !store::is_fresh(&path, &key) {
                self.note(
                    stage,
                    format!(
                        "training corpus for {} ({} samples)",
                        s.id(),
                        c.train_samples
                    ),
                );
                let d = generate_training_corpus(
                    self.master("experiment/train", 0),
                    c.train_samples,
                    &s,
                    &c.world,
                )
                .map_err(stage_err(stage))?;
                self.persist(&path, &d, &key, stage)?;
                train = Some(d);
                run.executed = true;
            }
            self.record(run, &path, &key);

            let hpath = self.heldout_path(&s);
            let hkey = self.heldout_key(&s);
            if !store::is_fresh(&hpath, &hkey) {
                let train = match train {
                    Some(d) => d,
                    None => load_dataset(&path).map_err(stage_err(stage))?,
                };
                self.note(stage, format!("held-out specifications for {}", s.id()));
                let heldout = self.heldout_dataset(&s, &train).map_err(stage_err(stage))?;
                self.persist(&hpath, &heldout, &hkey, stage)?;
                run.executed = true;
            }
            self.record(run, &hpath, &hkey);
        }
        for s in self.aux_semantics() {
            let path = self.aux_path(&s);
            let key = self.aux_key(&s);
            if !store::is_fresh(&path, &key) {
                self.note(
                    stage,
                    format!(
                        "auxiliary dataset for {} ({} samples)",
                        s.id(),
                        c.aux_samples
                    ),
                );
                let d = generate_auxiliary_dataset(
                    self.master("experiment/aux", 0),
                    c.aux_samples,
                    &s,
                    &c.world,
                )
                .map_err(stage_err(stage))?;
                self.persist(&path, &d, &key, stage)?;
                run.executed = true;
            }
            self.record(run, &path, &key);
        }
        Ok(())
    }

    fn persist(
        &self,
        path: &Path,
        d: &Dataset,
        key: &str,
        stage: Stage,
    ) -> Result<(), ExperimentError> {
        store::unmark(path).map_err(io_err(path))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        persist_dataset(d, path).map_err(stage_err(stage))?;
        store::mark(path, key).map_err(io_err(path))
    }

    /// Fresh specifications whose `(s0, sn)` pair never occurs in `train`.
    fn heldout_dataset(&self, s: &SemanticsMap, train: &Dataset) -> Result<Dataset, String> {
        let want = self.config.heldout_specs;
        let pool = generate_training_corpus(
            self.master("experiment/heldout", 0),
            2 * want + 64,
            s,
            &self.config.world,
        )
        .map_err(|e| e.to_string())?;
        let mut seen: HashSet<&[u8]> = train.samples.iter().map(|x| x.spec_tokens()).collect();
        let mut samples = Vec::with_capacity(want);
        for x in &pool.samples {
            if samples.len() == want {
                break;
            }
            if seen.insert(x.spec_tokens()) {
                samples.push(x.clone());
            }
        }
        if samples.is_empty() {
            return Err("every held-out candidate also occurs in the training corpus".into());
        }
        let mut manifest = pool.manifest.clone();
        manifest.count = samples.len();
        Ok(Dataset { manifest, samples })
    }

    fn generation_specs(&self, heldout: &Dataset) -> Result<Vec<GenerationSpec>, String> {
        heldout
            .samples
            .iter()
            .map(|x| {
                let s0 = decode_grid(&x.tokens[1..1 + NUM_CELLS]).map_err(|e| e.to_string())?;
                let sn = decode_grid(&x.tokens[2 + NUM_CELLS..2 + 2 * NUM_CELLS])
                    .map_err(|e| e.to_string())?;
                Ok(GenerationSpec { s0, sn })
            })
            .collect()
    }

    fn train_lms(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        for s in self.lm_semantics() {
            let dir = self.lm_dir(&s);
            let list_path = dir.join("checkpoints.json");
            let log_path = dir.join("train_log.csv");
            let key = self.lm_key(&s);
            let current = store::is_fresh(&list_path, &key)
                && store::is_fresh(&log_path, &key)
                && self
                    .read_json::<CheckpointList>(&list_path)?
                    .steps
                    .iter()
                    .all(|&t| {
                        store::is_fresh(&self.checkpoint_path(&s, t), &self.checkpoint_key(&s, t))
                    });
            if !current {
                self.train_one(&s, stage)?;
                run.executed = true;
            }
            self.record(run, &list_path, &key);
            self.record(run, &log_path, &key);
            for t in self.checkpoint_steps(&s)? {
                let p = self.checkpoint_path(&s, t);
                self.record(run, &p, &self.checkpoint_key(&s, t));
            }

            let steps = self.generation_steps(&s)?;
            let gen_path = dir.join("generation.json");
            let gen_key = self.generation_key(&s, &steps)?;
            if !store::is_fresh(&gen_path, &gen_key) {
                let summary = self.evaluate_generation(&s, &steps, stage)?;
                self.write_json(stage, &gen_path, &summary, &gen_key)?;
                run.executed = true;
            }
            self.record(run, &gen_path, &gen_key);
        }
        Ok(())
    }

    fn train_one(&self, s: &SemanticsMap, stage: Stage) -> Result<(), ExperimentError> {
        let corpus = self.load_dataset_checked(&self.train_path(s), &self.train_key(s), stage)?;
        let dir = self.lm_dir(s);
        let list_path = dir.join("checkpoints.json");
        store::unmark(&list_path).map_err(io_err(&list_path))?;
        let cfg = self.lm_config();
        let model = init_lm(&cfg, cfg.seed).map_err(stage_err(stage))?;
        self.note(
            stage,
            format!(
                "training LM on {} ({} parameters, {} tokens)",
                s.id(),
                model.num_params(),
                cfg.total_tokens
            ),
        );
        let mut steps = Vec::new();
        let (_, log) = train_lm_with(model, &corpus.samples, |m, log| {
            let path = self.checkpoint_path(s, m.step());
            let mut bytes = Vec::new();
            write_checkpoint(m, &mut bytes)?;
            store::unmark(&path)?;
            store::write_atomic(&path, &bytes)?;
            store::mark(&path, &self.checkpoint_key(s, m.step()))?;
            steps.push(m.step());
            match log.last() {
                Some(r) => self.note(
                    stage,
                    format!("{}: step {} loss {:.4}", s.id(), r.step, r.loss),
                ),
                None => self.note(stage, format!("{}: initial checkpoint", s.id())),
            }
            Ok::<(), LmError>(())
        })
        .map_err(stage_err(stage))?;

        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &log {
            w.serialize(r).map_err(stage_err(stage))?;
        }
        let bytes = w.into_inner().map_err(stage_err(stage))?;
        let key = self.lm_key(s);
        self.write_marked(&dir.join("train_log.csv"), &bytes, &key)?;
        self.write_json(stage, &list_path, &CheckpointList { steps }, &key)
    }

    fn evaluate_generation(
        &self,
        s: &SemanticsMap,
        steps: &[u64],
        stage: Stage,
    ) -> Result<GenerationSummary, ExperimentError> {
        let heldout =
            self.load_dataset_checked(&self.heldout_path(s), &self.heldout_key(s), stage)?;
        let specs = self.generation_specs(&heldout).map_err(stage_err(stage))?;
        let random = random_program_accuracy(
            &specs,
            s,
            TRAIN_LENGTHS,
            self.master("experiment/random-programs", 0),
            self.config.random_program_draws,
        );
        let mut points = Vec::with_capacity(steps.len());
        for &t in steps {
            let model = self.load_model(s, t, stage)?;
            let acc = eval_generation_accuracy(&model, &specs, s).map_err(stage_err(stage))?;
            self.note(
                stage,
                format!(
                    "{}: generation accuracy at step {t}: {acc:.4} (random programs {random:.4})",
                    s.id()
                ),
            );
            points.push((t, acc));
        }
        Ok(GenerationSummary::new(
            s.id(),
            specs.len(),
            random,
            self.config.generation_threshold_factor,
            points,
        ))
    }

    fn extract(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        let cells = self.feature_cells()?;
        let mut aux: HashMap<SemanticsMap, Dataset> = HashMap::new();
        let mut model: Option<(SemanticsMap, u64, LmModel)> = None;
        for c in &cells {
            let path = self.features_path(c);
            let key = self.features_key(c);
            if !store::is_fresh(&path, &key) {
                if !aux.contains_key(&c.aux) {
                    let d = self.load_dataset_checked(
                        &self.aux_path(&c.aux),
                        &self.aux_key(&c.aux),
                        stage,
                    )?;
                    aux.insert(c.aux, d);
                }
                if !matches!(&model, Some((s, t, _)) if *s == c.lm && *t == c.step) {
                    model = Some((c.lm, c.step, self.load_model(&c.lm, c.step, stage)?));
                }
                let m = &model.as_ref().expect("loaded above").2;
                self.note(
                    stage,
                    format!(
                        "{} step {} over {} auxiliary data",
                        c.lm.id(),
                        c.step,
                        c.aux.id()
                    ),
                );
                let features = extract_dataset(m, &aux[&c.aux]).map_err(stage_err(stage))?;
                let mut bytes = Vec::new();
                features.write(&mut bytes).map_err(io_err(&path))?;
                self.write_marked(&path, &bytes, &key)?;
                run.executed = true;
            }
            self.record(run, &path, &key);
        }
        Ok(())
    }

    fn probe(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        let seeds = self.probe_seeds();
        let mut aux: HashMap<SemanticsMap, Dataset> = HashMap::new();
        for c in self.feature_cells()? {
            let mut table: Option<ProbeTable> = None;
            for &arch in &self.config.probe.architectures {
                let path = self.probe_path(&c, arch);
                let key = self.probe_key(&c, arch);
                if !store::is_fresh(&path, &key) {
                    if table.is_none() {
                        if !aux.contains_key(&c.aux) {
                            let d = self.load_dataset_checked(
                                &self.aux_path(&c.aux),
                                &self.aux_key(&c.aux),
                                stage,
                            )?;
                            aux.insert(c.aux, d);
                        }
                        let fpath = self.features_path(&c);
                        self.require(&fpath, &self.features_key(&c))?;
                        let file = fs::File::open(&fpath).map_err(io_err(&fpath))?;
                        let features = FeatureMatrix::read(std::io::BufReader::new(file))
                            .map_err(io_err(&fpath))?;
                        table = Some(
                            ProbeTable::new(features, &aux[&c.aux]).map_err(stage_err(stage))?,
                        );
                    }
                    self.note(
                        stage,
                        format!(
                            "{} probes on {} step {} with {} labels",
                            arch,
                            c.lm.id(),
                            c.step,
                            c.aux.id()
                        ),
                    );
                    let cfg = self.config.probe.config(arch);
                    let scores = probe_scores(table.as_ref().expect("built above"), &cfg, &seeds)
                        .map_err(stage_err(stage))?;
                    let cell = self.probe_cell(&c, arch, scores);
                    self.write_json(stage, &path, &cell, &key)?;
                    run.executed = true;
                }
                self.record(run, &path, &key);
            }
        }
        Ok(())
    }

    fn probe_cell(
        &self,
        c: &FeatureCell,
        arch: ProbeArchitecture,
        scores: BTreeMap<QuadrantSpec, Scores>,
    ) -> ProbeCell {
        let records = scores
            .iter()
            .map(|(q, s)| ProbeRecord {
                architecture: arch,
                checkpoint_step: c.step,
                calibration_split: split_name(SplitRole::Calibration, q.calibration),
                measurement_split: split_name(SplitRole::Measurement, q.measurement),
                semantics_train: c.lm.id(),
                semantics_probe: c.aux.id(),
                per_head: s.per_head,
                aggregate: s.aggregate,
                n: s.keys.len(),
            })
            .collect();
        ProbeCell {
            quadrants: scores
                .into_iter()
                .map(|(quadrant, scores)| QuadrantScores { quadrant, scores })
                .collect(),
            records,
        }
    }

    fn mediation_key(&self) -> Result<String, ExperimentError> {
        let cells = self.feature_cells()?;
        let mut keys = Vec::new();
        for c in &cells {
            for &arch in &self.config.probe.architectures {
                keys.push(self.probe_key(c, arch));
            }
        }
        Ok(hash_json(&(
            "mediation",
            keys,
            self.config.bootstrap_resamples,
            self.master("experiment/bootstrap", 0),
        )))
    }

    fn load_probe_cell(
        &self,
        c: &FeatureCell,
        arch: ProbeArchitecture,
    ) -> Result<ProbeCell, ExperimentError> {
        let path = self.probe_path(c, arch);
        self.require(&path, &self.probe_key(c, arch))?;
        self.read_json(&path)
    }

    fn mediate(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        let path = self.mediation_path();
        let key = self.mediation_key()?;
        if !store::is_fresh(&path, &key) {
            self.note(stage, "bootstrapping mediated measurements");
            let records = self.compute_mediation()?;
            self.write_json(stage, &path, &records, &key)?;
            run.executed = true;
        }
        self.record(run, &path, &key);
        Ok(())
    }

    fn compute_mediation(&self) -> Result<Vec<MediationRecord>, ExperimentError> {
        let target = self.semantics.target;
        let resamples = self.config.bootstrap_resamples;
        let bseed = self.master("experiment/bootstrap", 0);
        let target_final = self.final_step(&target)?;
        let steps = self.probed_steps()?;
        let mut records = Vec::new();
        for b in &self.semantics.baselines {
            let baseline_lm_step = if self.semantics.baseline_lms.contains(b) {
                Some(self.final_step(b)?)
            } else {
                None
            };
            for &step in &steps {
                for &arch in &self.config.probe.architectures {
                    let mm = self.load_probe_cell(
                        &FeatureCell {
                            lm: target,
                            step,
                            aux: target,
                        },
                        arch,
                    )?;
                    let mmp = self.load_probe_cell(
                        &FeatureCell {
                            lm: target,
                            step,
                            aux: *b,
                        },
                        arch,
                    )?;
                    let other = match baseline_lm_step {
                        Some(bs) if step == target_final => Some((
                            self.load_probe_cell(
                                &FeatureCell {
                                    lm: *b,
                                    step: bs,
                                    aux: target,
                                },
                                arch,
                            )?,
                            self.load_probe_cell(
                                &FeatureCell {
                                    lm: *b,
                                    step: bs,
                                    aux: *b,
                                },
                                arch,
                            )?,
                        )),
                        _ => None,
                    };
                    for q in QuadrantSpec::ALL {
                        let (a, c) = (mm.scores(q)?, mmp.scores(q)?);
                        let lower = bootstrap_difference(a, c, resamples, bseed).map_err(|e| {
                            ExperimentError::Stage {
                                stage: "mediate",
                                message: e.to_string(),
                            }
                        })?;
                        let (mpm, mpmp) = match &other {
                            Some((x, y)) => (
                                Some(bootstrap_accuracy(x.scores(q)?, resamples, bseed)),
                                Some(bootstrap_accuracy(y.scores(q)?, resamples, bseed)),
                            ),
                            None => (None, None),
                        };
                        let quadruple = AccuracyQuadruple {
                            mm: bootstrap_accuracy(a, resamples, bseed),
                            mmp: bootstrap_accuracy(c, resamples, bseed),
                            mpm,
                            mpmp,
                        };
                        records.push(MediationRecord {
                            baseline: b.id(),
                            checkpoint_step: step,
                            architecture: arch,
                            quadrant: q,
                            report: nie_bounds(&quadruple, Some(lower)),
                        });
                    }
                }
            }
        }
        Ok(records)
    }

    fn report(&self, run: &mut StageRun) -> Result<(), ExperimentError> {
        let stage = run.stage;
        let mut gen_keys = Vec::new();
        for s in self.lm_semantics() {
            gen_keys.push(self.generation_key(&s, &self.generation_steps(&s)?)?);
        }
        let key = hash_json(&("report", self.mediation_key()?, gen_keys));
        let dir = self.root.join("report");
        let summary_path = dir.join("summary.json");
        if !store::is_fresh(&summary_path, &key) {
            self.note(stage, "writing report");
            let records = self.mediation_records()?;
            let generation = self.generation()?;
            store::unmark(&summary_path).map_err(io_err(&summary_path))?;
            let files = report::render(
                &self.semantics,
                &self.config.probe.architectures,
                self.final_step(&self.semantics.target)?,
                &records,
                generation,
            )
            .map_err(stage_err(stage))?;
            for (rel, bytes) in &files {
                let path = dir.join(rel);
                if rel != "summary.json" {
                    self.write_marked(&path, bytes, &key)?;
                }
            }
            let summary = files
                .iter()
                .find(|(r, _)| r == "summary.json")
                .expect("summary is rendered");
            self.write_marked(&summary_path, &summary.1, &key)?;
            run.executed = true;
        }
        for entry in walk(&dir).map_err(io_err(&dir))? {
            if entry.extension().is_some_and(|e| e != "key") {
                self.record(run, &entry, &key);
            }
        }
        Ok(())
    }
}

/// Every file below `dir`, sorted.
fn walk(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
