//! Latent causal probing on a grid-world navigation language.
//!
//! The crate covers the full measurement loop: a structural causal model of
//! program text ([`gridworld`], [`corpus`]), a small decoder-only LM trained on
//! that text ([`lm`]), probing classifiers over its hidden states ([`probes`]),
//! and the mediation analysis that attributes probe accuracy to what the LM
//! learned ([`causal`]). [`experiment`] wires the stages into a resumable
//! pipeline.

pub mod causal;
pub mod corpus;
pub mod experiment;
pub mod gridworld;
pub mod lm;
pub mod nn;
pub mod probes;
pub mod seed;
