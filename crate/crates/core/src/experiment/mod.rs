//! The end-to-end experiment as a resumable pipeline of stages.
//!
//! Each stage reads the artifacts of the stages before it from the run
//! directory and writes its own. An artifact is recomputed only when the
//! inputs it was computed from change, so an interrupted or repeated run
//! picks up where the last one stopped.

mod config;
mod pipeline;
mod report;
mod store;

use thiserror::Error;

pub use config::{ExperimentConfig, ProbePlan, ResolvedSemantics, SemanticsSpec};
pub use pipeline::{
    run_mediation_experiment, ExperimentResults, MediationRecord, Pipeline, Stage, StageOutcome,
};
pub use report::{
    check_criteria, BaselineSummary, CriterionCheck, CriterionStatus, FinalCell, GenerationSummary,
    Summary,
};
pub use store::{hash_bytes, hash_file, hash_json};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("missing results: {0}")]
    MissingResults(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 3,
        }
    }
}
