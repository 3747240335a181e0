//! SCM-driven corpus generation.
//!
//! Training samples are `⟨BOS, enc(s0), SEP, enc(sn), SEP, p1 … pn, EOS⟩`.
//! Auxiliary (probing) samples use the same layout with the `sn` block
//! replaced by a second copy of `enc(s0)`, so nothing about the final state
//! reaches the LM; they additionally carry the latent label of every
//! intermediate state and its bound/free tag.

mod io;
pub mod vocab;

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{
    latent_features, ExecError, ExogenousAssignment, GridError, LatentLabel, SemanticsMap,
    WorldConfig, NUM_CELLS,
};
use crate::seed;

pub use io::{load_dataset, persist_dataset, SCHEMA_VERSION};
pub use vocab::{
    decode_grid, decode_program, encode_grid, encode_program, VOCAB_SIZE, VOCAB_VERSION,
};

/// Index of `p1` in every sample.
pub const PROGRAM_START: usize = 2 * NUM_CELLS + 3;
pub const TRAIN_LENGTHS: RangeInclusive<usize> = 6..=10;
pub const AUX_LENGTHS: RangeInclusive<usize> = 1..=15;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed tokens: {0}")]
    MalformedTokens(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("state index {0} outside 1..=15")]
    IndexOutOfRange(usize),
    #[error("dataset count must be at least 1")]
    EmptyDataset,
    #[error("i/o error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Io {
        line: Option<usize>,
        message: String,
    },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Auxiliary,
}

impl Role {
    fn stream_tag(self) -> &'static str {
        match self {
            Role::Train => "corpus/train",
            Role::Auxiliary => "corpus/auxiliary",
        }
    }

    pub fn default_lengths(self) -> RangeInclusive<usize> {
        match self {
            Role::Train => TRAIN_LENGTHS,
            Role::Auxiliary => AUX_LENGTHS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    Bound,
    Free,
}

/// Bound iff the state index falls inside the training length range (those
/// states were observed as final states during LM training).
pub fn partition_bound_free(
    state_index: usize,
    train_lengths: &RangeInclusive<usize>,
) -> Result<Binding, CorpusError> {
    if !AUX_LENGTHS.contains(&state_index) {
        return Err(CorpusError::IndexOutOfRange(state_index));
    }
    Ok(if train_lengths.contains(&state_index) {
        Binding::Bound
    } else {
        Binding::Free
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub role: Role,
    pub semantics_id: String,
    pub count: usize,
    pub length_range: [usize; 2],
    pub seed: u64,
    pub vocab_version: String,
    pub world: WorldConfig,
}

impl DatasetManifest {
    pub fn lengths(&self) -> RangeInclusive<usize> {
        self.length_range[0]..=self.length_range[1]
    }

    pub fn semantics(&self) -> Result<SemanticsMap, CorpusError> {
        Ok(SemanticsMap::from_id(&self.semantics_id)?)
    }

    /// Rebuilds the dataset this manifest describes.
    pub fn regenerate(&self) -> Result<Dataset, CorpusError> {
        generate(self.clone())
    }
}

/// One training sample or auxiliary example. Training samples have empty
/// `labels` and `bound_mask`; for auxiliary examples `labels[i - 1]` is the
/// label of state `s_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub sample_seed: u64,
    pub tokens: Vec<u8>,
    pub labels: Vec<LatentLabel>,
    pub bound_mask: Vec<bool>,
}

impl AsRef<[u8]> for Sample {
    fn as_ref(&self) -> &[u8] {
        &self.tokens
    }
}

impl Sample {
    pub fn program_len(&self) -> usize {
        self.tokens.len() - PROGRAM_START - 1
    }

    pub fn program_tokens(&self) -> &[u8] {
        &self.tokens[PROGRAM_START..self.tokens.len() - 1]
    }

    /// Specification prefix `⟨BOS, s0, SEP, s_n or s0, SEP⟩`.
    pub fn spec_tokens(&self) -> &[u8] {
        &self.tokens[..PROGRAM_START]
    }

    /// Position of the token `p_i` (1-based state index).
    pub fn position_of_state(i: usize) -> usize {
        PROGRAM_START + i - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `⟨BOS, a, SEP, b, SEP, program, EOS⟩`.
pub fn assemble_tokens(
    first: &[u8; NUM_CELLS],
    second: &[u8; NUM_CELLS],
    program: &[u8],
) -> Vec<u8> {
    let mut t = Vec::with_capacity(PROGRAM_START + program.len() + 1);
    t.push(vocab::BOS);
    t.extend_from_slice(first);
    t.push(vocab::SEP);
    t.extend_from_slice(second);
    t.push(vocab::SEP);
    t.extend_from_slice(program);
    t.push(vocab::EOS);
    t
}

fn build_sample(
    id: u64,
    manifest: &DatasetManifest,
    semantics: &SemanticsMap,
) -> Result<Sample, CorpusError> {
    let sample_seed = seed::derive(manifest.seed, manifest.role.stream_tag(), id);
    let exo =
        ExogenousAssignment::sample(sample_seed, &manifest.world, manifest.lengths(), semantics)?;
    let trace = exo.trace(semantics)?;
    let s0 = encode_grid(&exo.initial_state);
    let program = encode_program(&exo.program);
    Ok(match manifest.role {
        Role::Train => Sample {
            id,
            sample_seed,
            tokens: assemble_tokens(&s0, &encode_grid(trace.last()), &program),
            labels: Vec::new(),
            bound_mask: Vec::new(),
        },
        Role::Auxiliary => {
            let labels = trace.states[1..].iter().map(latent_features).collect();
            let bound_mask = (1..=exo.program.len())
                .map(|i| partition_bound_free(i, &TRAIN_LENGTHS).map(|b| b == Binding::Bound))
                .collect::<Result<_, _>>()?;
            Sample {
                id,
                sample_seed,
                tokens: assemble_tokens(&s0, &s0, &program),
                labels,
                bound_mask,
            }
        }
    })
}

fn generate(manifest: DatasetManifest) -> Result<Dataset, CorpusError> {
    if manifest.count == 0 {
        return Err(CorpusError::EmptyDataset);
    }
    let semantics = manifest.semantics()?;
    let samples = (0..manifest.count as u64)
        .map(|id| build_sample(id, &manifest, &semantics))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { manifest, samples })
}

fn manifest_for(
    role: Role,
    seed: u64,
    count: usize,
    semantics: &SemanticsMap,
    world: &WorldConfig,
) -> DatasetManifest {
    let lengths = role.default_lengths();
    DatasetManifest {
        role,
        semantics_id: semantics.id(),
        count,
        length_range: [*lengths.start(), *lengths.end()],
        seed,
        vocab_version: VOCAB_VERSION.to_string(),
        world: *world,
    }
}

pub fn generate_training_corpus(
    seed: u64,
    count: usize,
    semantics: &SemanticsMap,
    world: &WorldConfig,
) -> Result<Dataset, CorpusError> {
    generate(manifest_for(Role::Train, seed, count, semantics, world))
}

pub fn generate_auxiliary_dataset(
    seed: u64,
    count: usize,
    semantics: &SemanticsMap,
    world: &WorldConfig,
) -> Result<Dataset, CorpusError> {
    generate(manifest_for(Role::Auxiliary, seed, count, semantics, world))
}

/// Relabels every action token through `map`, leaving grids and separators
/// untouched.
pub fn relabel_actions(tokens: &[u8], map: &SemanticsMap) -> Vec<u8> {
    tokens
        .iter()
        .map(|&t| match vocab::token_action(t) {
            Some(a) => vocab::action_token(map.apply(a)),
            None => t,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Calibration,
    Measurement,
}

/// Calibration/measurement assignment of a sample. Every fifth sample goes to
/// measurement, giving an exact 80/20 split that is disjoint by sample and
/// therefore applies uniformly to the bound and free subsets.
pub fn split_role(sample_id: u64) -> SplitRole {
    if sample_id % 5 == 4 {
        SplitRole::Measurement
    } else {
        SplitRole::Calibration
    }
}
