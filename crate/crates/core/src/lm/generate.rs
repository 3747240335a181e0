//! Greedy program generation and the semantic generation-accuracy metric.

use std::ops::RangeInclusive;

use super::{LmError, LmModel};
use crate::corpus::vocab::{token_action, EOS};
use crate::corpus::{assemble_tokens, encode_grid, VOCAB_SIZE};
use crate::gridworld::{execute, sample_program_with, Action, GridState, Program, SemanticsMap};
use crate::nn::argmax;
use crate::seed;

pub const MAX_GENERATED_ACTIONS: usize = 15;

/// A held-out specification: initial and final state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationSpec {
    pub s0: GridState,
    pub sn: GridState,
}

/// Greedy decoding from `⟨BOS, s0, SEP, sn, SEP⟩` until `EOS` or
/// [`MAX_GENERATED_ACTIONS`] actions.
pub fn generate_program(
    model: &LmModel,
    s0: &GridState,
    sn: &GridState,
) -> Result<Program, LmError> {
    let mut tokens = assemble_tokens(&encode_grid(s0), &encode_grid(sn), &[]);
    tokens.pop(); // drop the EOS appended by `assemble_tokens`
    let mut actions: Vec<Action> = Vec::new();
    while actions.len() < MAX_GENERATED_ACTIONS {
        let cache = model.forward(&[&tokens], None)?;
        let last = tokens.len() - 1;
        let next = argmax(&cache.logits[last * VOCAB_SIZE..(last + 1) * VOCAB_SIZE]) as u8;
        if next == EOS {
            break;
        }
        match token_action(next) {
            Some(a) => actions.push(a),
            None => {
                return Err(LmError::MalformedGeneration(format!(
                    "non-action token {next} after {} actions",
                    actions.len()
                )))
            }
        }
        tokens.push(next);
    }
    Ok(Program::new(actions))
}

fn reaches(spec: &GenerationSpec, program: &Program, semantics: &SemanticsMap) -> bool {
    execute(&spec.s0, program, semantics)
        .map(|t| *t.last() == spec.sn)
        .unwrap_or(false)
}

/// Fraction of specifications for which the generated program runs without
/// crashing under `semantics` and ends in `sn`. Malformed generations count as
/// failures.
pub fn eval_generation_accuracy(
    model: &LmModel,
    specs: &[GenerationSpec],
    semantics: &SemanticsMap,
) -> Result<f64, LmError> {
    if specs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for spec in specs {
        match generate_program(model, &spec.s0, &spec.sn) {
            Ok(p) if reaches(spec, &p, semantics) => correct += 1,
            Ok(_) | Err(LmError::MalformedGeneration(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(correct as f64 / specs.len() as f64)
}

/// Accuracy of uniformly sampled valid programs on the same specifications,
/// averaged over `draws` programs per specification.
pub fn random_program_accuracy(
    specs: &[GenerationSpec],
    semantics: &SemanticsMap,
    lengths: RangeInclusive<usize>,
    seed_value: u64,
    draws: usize,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (k, spec) in specs.iter().enumerate() {
        let mut rng = seed::rng(seed_value, "lm/random-baseline", k as u64);
        for _ in 0..draws {
            let p = sample_program_with(&mut rng, &spec.s0, lengths.clone(), semantics)
                .expect("turns are always valid, so sampling cannot get stuck");
            hits += reaches(spec, &p, semantics) as usize;
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Direction, Position};

    #[test]
    fn semantic_equivalence_counts() {
        let s0 = GridState::empty(Position::new(4, 4), Direction::North).unwrap();
        let id = SemanticsMap::identity();
        let reference = Program::new(vec![Action::TurnRight, Action::Move]);
        let sn = *execute(&s0, &reference, &id).unwrap().last();
        let spec = GenerationSpec { s0, sn };
        let other = Program::new(vec![
            Action::TurnLeft,
            Action::TurnLeft,
            Action::TurnLeft,
            Action::Move,
        ]);
        assert!(reaches(&spec, &other, &id));
        let crash = Program::new(vec![Action::PickMarker]);
        assert!(!reaches(&spec, &crash, &id));
    }
}
