//! Causal machinery: exact effects on discrete SCMs, the valid-baseline
//! conditions, bounds on the indirect effect mediated by the LM, and the
//! probing measurements those bounds are computed from.

mod mediation;
mod quadrant;
mod scm;

use thiserror::Error;

pub use mediation::{
    check_valid_baseline, nie_bounds, nie_chain_holds, AccuracyQuadruple, BaselineCheck, Estimate,
    InequalityVerdict, MediationReport, MediationVerdict,
};
pub use quadrant::{
    bootstrap_accuracy, bootstrap_difference, mediated_measurement, probe_scores,
    quadrant_measurements, split_name, BootstrapConfig, ProbeTable, QuadrantMeasurement,
    QuadrantSpec, Scores,
};
pub use scm::{umbrella_scm, DiscreteScm, Intervention, ScmBuilder};

use crate::lm::LmError;
use crate::probes::ProbeError;

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("conditioning event has probability zero")]
    ZeroProbabilityCondition,
    #[error("causal graph has a cycle through {0}")]
    Cyclic(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("value {value} is not in the domain of {variable}")]
    UnknownValue { variable: String, value: String },
    #[error("invalid SCM: {0}")]
    InvalidScm(String),
    #[error("misaligned measurement data: {0}")]
    Misaligned(String),
    #[error("invalid measurement configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Lm(#[from] LmError),
}
