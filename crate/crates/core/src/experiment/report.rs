//! Report rendering and the qualitative checks run against a finished
//! experiment.

use serde::{Deserialize, Serialize};

use super::config::ResolvedSemantics;
use super::pipeline::MediationRecord;
use crate::causal::{Estimate, InequalityVerdict, MediationVerdict, QuadrantSpec};
use crate::gridworld::{Action, SemanticsMap};
use crate::probes::ProbeArchitecture;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationPoint {
    pub step: u64,
    pub accuracy: f64,
}

/// Held-out generation accuracy of one LM against the random-program
/// baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub semantics: String,
    pub heldout_specs: usize,
    /// Accuracy of uniformly random programs of training lengths.
    pub random_baseline: f64,
    pub threshold_factor: f64,
    pub threshold: f64,
    pub checkpoints: Vec<GenerationPoint>,
    pub final_accuracy: f64,
    pub exceeds_threshold: bool,
}

impl GenerationSummary {
    pub fn new(
        semantics: String,
        heldout_specs: usize,
        random_baseline: f64,
        threshold_factor: f64,
        points: Vec<(u64, f64)>,
    ) -> Self {
        let threshold = threshold_factor * random_baseline;
        let final_accuracy = points.last().map(|p| p.1).unwrap_or(0.0);
        Self {
            semantics,
            heldout_specs,
            random_baseline,
            threshold_factor,
            threshold,
            checkpoints: points
                .into_iter()
                .map(|(step, accuracy)| GenerationPoint { step, accuracy })
                .collect(),
            final_accuracy,
            exceeds_threshold: final_accuracy > threshold,
        }
    }
}

/// Final-checkpoint result for one quadrant and architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalCell {
    pub quadrant: String,
    pub quadrant_name: String,
    pub architecture: ProbeArchitecture,
    pub raw: Estimate,
    pub baseline: Estimate,
    pub mediated: Estimate,
    pub eq1: InequalityVerdict,
    pub eq2: InequalityVerdict,
    pub nie_m_mp: Option<f64>,
    pub nie_mp_m: Option<f64>,
    pub verdict: MediationVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub baseline: String,
    /// Whether a second LM was trained on this baseline.
    pub lm_trained: bool,
    pub cells: Vec<FinalCell>,
}

impl BaselineSummary {
    pub fn cell(
        &self,
        quadrant: QuadrantSpec,
        architecture: ProbeArchitecture,
    ) -> Option<&FinalCell> {
        self.cells
            .iter()
            .find(|c| c.quadrant == quadrant.id() && c.architecture == architecture)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target: String,
    pub baselines: Vec<String>,
    pub final_step: u64,
    pub generation: Vec<GenerationSummary>,
    pub final_measurements: Vec<BaselineSummary>,
}

impl Summary {
    pub fn baseline(&self, id: &str) -> Option<&BaselineSummary> {
        self.final_measurements.iter().find(|b| b.baseline == id)
    }

    pub fn generation_of(&self, id: &str) -> Option<&GenerationSummary> {
        self.generation.iter().find(|g| g.semantics == id)
    }
}

fn path_id(id: &str) -> String {
    id.replace(':', "-")
}

/// Renders every report file as `(path relative to the report directory,
/// contents)`.
pub(crate) fn render(
    semantics: &ResolvedSemantics,
    architectures: &[ProbeArchitecture],
    final_step: u64,
    records: &[MediationRecord],
    generation: Vec<GenerationSummary>,
) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    let arch_rank = |a: ProbeArchitecture| {
        architectures
            .iter()
            .position(|&x| x == a)
            .unwrap_or(usize::MAX)
    };
    let mut final_measurements = Vec::new();
    for b in &semantics.baselines {
        let id = b.id();
        for q in QuadrantSpec::ALL {
            let mut rows: Vec<&MediationRecord> = records
                .iter()
                .filter(|r| r.baseline == id && r.quadrant == q)
                .collect();
            rows.sort_by_key(|r| (r.checkpoint_step, arch_rank(r.architecture)));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "checkpoint_step",
                "architecture",
                "raw_acc",
                "mediated",
                "ci_lo",
                "ci_hi",
            ])
            .map_err(|e| e.to_string())?;
            for r in rows {
                let m = &r.report.lower_bound;
                w.write_record([
                    r.checkpoint_step.to_string(),
                    r.architecture.name().to_string(),
                    r.report.quadruple.mm.value.to_string(),
                    m.value.to_string(),
                    m.ci_lo.to_string(),
                    m.ci_hi.to_string(),
                ])
                .map_err(|e| e.to_string())?;
            }
            files.push((
                format!("{}/{}.csv", path_id(&id), q.id()),
                w.into_inner().map_err(|e| e.to_string())?,
            ));
        }
        let mut cells: Vec<FinalCell> = records
            .iter()
            .filter(|r| r.baseline == id && r.checkpoint_step == final_step)
            .map(|r| FinalCell {
                quadrant: r.quadrant.id().to_string(),
                quadrant_name: r.quadrant.name().to_string(),
                architecture: r.architecture,
                raw: r.report.quadruple.mm,
                baseline: r.report.quadruple.mmp,
                mediated: r.report.lower_bound,
                eq1: r.report.check.eq1_verdict,
                eq2: r.report.check.eq2_verdict,
                nie_m_mp: r.report.nie_m_mp,
                nie_mp_m: r.report.nie_mp_m,
                verdict: r.report.verdict,
            })
            .collect();
        cells.sort_by_key(|c| {
            (
                arch_rank(c.architecture),
                QuadrantSpec::ALL.iter().position(|q| q.id() == c.quadrant),
            )
        });
        final_measurements.push(BaselineSummary {
            baseline: id,
            lm_trained: semantics.baseline_lms.contains(b),
            cells,
        });
    }
    let summary = Summary {
        target: semantics.target.id(),
        baselines: semantics.baselines.iter().map(|b| b.id()).collect(),
        final_step,
        generation,
        final_measurements,
    };
    files.push(("summary.md".into(), markdown(&summary).into_bytes()));
    let mut json = serde_json::to_vec_pretty(&summary).map_err(|e| e.to_string())?;
    json.push(b'\n');
    files.push(("summary.json".into(), json));
    Ok(files)
}

fn markdown(s: &Summary) -> String {
    let mut out = format!(
        "# Mediation report: target `{}`, final step {}\n\n## Generation\n\n",
        s.target, s.final_step
    );
    out.push_str(
        "The threshold is the configured factor times the accuracy of random valid programs.\n\n",
    );
    out.push_str("| LM | held-out specs | random programs | factor | threshold | accuracy by step | final accuracy | above threshold |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for g in &s.generation {
        let curve: Vec<String> = g
            .checkpoints
            .iter()
            .map(|p| format!("{}: {:.4}", p.step, p.accuracy))
            .collect();
        out.push_str(&format!(
            "| {} | {} | {:.4} | {} | {:.4} | {} | {:.4} | {} |\n",
            g.semantics,
            g.heldout_specs,
            g.random_baseline,
            g.threshold_factor,
            g.threshold,
            curve.join(", "),
            g.final_accuracy,
            if g.exceeds_threshold { "yes" } else { "no" }
        ));
    }
    for b in &s.final_measurements {
        out.push_str(&format!("\n## Baseline `{}`\n\n", b.baseline));
        out.push_str("| probe | quadrant | raw | baseline | mediated | 95% CI | eq1 | eq2 | verdict |\n|---|---|---|---|---|---|---|---|---|\n");
        for c in &b.cells {
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | [{:.4}, {:.4}] | {} | {} | {} |\n",
                c.architecture,
                c.quadrant_name,
                c.raw.value,
                c.baseline.value,
                c.mediated.value,
                c.mediated.ci_lo,
                c.mediated.ci_hi,
                verdict_name(c.eq1),
                verdict_name(c.eq2),
                match c.verdict {
                    MediationVerdict::PositiveMediation => "positive",
                    MediationVerdict::Inconclusive => "inconclusive",
                }
            ));
        }
    }
    out.push_str(
        "\n## End-to-end checks\n\n| criterion | status | check | detail |\n|---|---|---|---|\n",
    );
    for c in check_criteria(s) {
        let status = match c.status {
            CriterionStatus::Pass => "pass",
            CriterionStatus::Fail => "fail",
            CriterionStatus::Warn => "warn",
            CriterionStatus::NotApplicable => "n/a",
        };
        out.push_str(&format!(
            "| {} | {status} | {} | {} |\n",
            c.criterion, c.description, c.detail
        ));
    }
    out
}

fn verdict_name(v: InequalityVerdict) -> &'static str {
    match v {
        InequalityVerdict::Holds => "holds",
        InequalityVerdict::HoldsWithinNoise => "holds within noise",
        InequalityVerdict::Violated => "violated",
        InequalityVerdict::AssumedBySymmetry => "assumed",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionStatus {
    Pass,
    Fail,
    /// A soft check that did not hold.
    Warn,
    /// The experiment lacks the baseline or architecture the check needs.
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionCheck {
    pub criterion: u8,
    pub description: String,
    pub status: CriterionStatus,
    pub detail: String,
}

fn all_quadrants_positive(b: &BaselineSummary, arch: ProbeArchitecture) -> Option<(bool, String)> {
    let mut detail = Vec::new();
    let mut ok = true;
    for q in QuadrantSpec::ALL {
        let c = b.cell(q, arch)?;
        ok &= c.mediated.value > 0.0 && c.mediated.ci_lo > 0.0;
        detail.push(format!(
            "{} {:.4} [{:.4}, {:.4}]",
            q.id(),
            c.mediated.value,
            c.mediated.ci_lo,
            c.mediated.ci_hi
        ));
    }
    Some((ok, detail.join("; ")))
}

fn check(
    criterion: u8,
    description: &str,
    status: CriterionStatus,
    detail: String,
) -> CriterionCheck {
    CriterionCheck {
        criterion,
        description: description.into(),
        status,
        detail,
    }
}

/// The end-to-end qualitative checks on a finished identity-target
/// experiment: generation and cycle baseline signs, the valid-baseline
/// inequalities, the swap ablations and the probe-capacity ordering.
pub fn check_criteria(s: &Summary) -> Vec<CriterionCheck> {
    use CriterionStatus::*;
    let mlp2 = ProbeArchitecture::Mlp2;
    let cycle = SemanticsMap::cycle3().id();
    let swap_move = SemanticsMap::swap(Action::Move, Action::TurnLeft).id();
    let swap_turns = SemanticsMap::swap(Action::TurnRight, Action::TurnLeft).id();
    let mut out = Vec::new();

    let d7 = "generation above threshold; cycle3 mediated > 0 with CI excluding 0 in all quadrants (mlp2)";
    match (
        s.generation_of(&s.target),
        s.baseline(&cycle)
            .and_then(|b| all_quadrants_positive(b, mlp2)),
    ) {
        (Some(g), Some((ok, detail))) => {
            let pass = ok && g.exceeds_threshold;
            let detail = format!(
                "generation {:.4} vs threshold {:.4} ({}x random {:.4}); {detail}",
                g.final_accuracy, g.threshold, g.threshold_factor, g.random_baseline
            );
            out.push(check(7, d7, if pass { Pass } else { Fail }, detail));
        }
        _ => out.push(check(
            7,
            d7,
            NotApplicable,
            "needs the cycle3 baseline and the mlp2 probe".into(),
        )),
    }

    let d8 = "valid-baseline inequalities hold (within noise) for the cycle3 LM";
    match s.baseline(&cycle).filter(|b| b.lm_trained) {
        Some(b) => {
            let bad: Vec<String> = b
                .cells
                .iter()
                .filter(|c| {
                    c.eq1.is_violated()
                        || c.eq2.is_violated()
                        || c.eq1 == InequalityVerdict::AssumedBySymmetry
                })
                .map(|c| {
                    format!(
                        "{} {} eq1 {} eq2 {}",
                        c.architecture,
                        c.quadrant,
                        verdict_name(c.eq1),
                        verdict_name(c.eq2)
                    )
                })
                .collect();
            let within = b
                .cells
                .iter()
                .filter(|c| {
                    c.eq1 == InequalityVerdict::HoldsWithinNoise
                        || c.eq2 == InequalityVerdict::HoldsWithinNoise
                })
                .count();
            let detail = if bad.is_empty() {
                format!(
                    "{} cells checked, {within} hold only within noise",
                    b.cells.len()
                )
            } else {
                bad.join("; ")
            };
            out.push(check(
                8,
                d8,
                if bad.is_empty() && !b.cells.is_empty() {
                    Pass
                } else {
                    Fail
                },
                detail,
            ));
        }
        None => out.push(check(
            8,
            d8,
            NotApplicable,
            "no LM was trained on cycle3".into(),
        )),
    }

    let d9 = "swap(move, turn_left) positive in all quadrants; swap(turn_right, turn_left) CI covers 0 in at least 3 quadrants (mlp2)";
    let a = s
        .baseline(&swap_move)
        .and_then(|b| all_quadrants_positive(b, mlp2));
    let b = s.baseline(&swap_turns).and_then(|b| {
        let cells: Option<Vec<&FinalCell>> =
            QuadrantSpec::ALL.iter().map(|q| b.cell(*q, mlp2)).collect();
        cells.map(|cells| {
            let covering = cells
                .iter()
                .filter(|c| c.mediated.ci_lo <= 0.0 && c.mediated.ci_hi >= 0.0)
                .count();
            let detail = cells
                .iter()
                .map(|c| {
                    format!(
                        "{} {:.4} [{:.4}, {:.4}]",
                        c.quadrant, c.mediated.value, c.mediated.ci_lo, c.mediated.ci_hi
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            (covering >= 3, format!("{covering}/4 cover 0: {detail}"))
        })
    });
    match (a, b) {
        (Some((ok_a, da)), Some((ok_b, db))) => {
            let detail = format!("swap_move_turn_left: {da} | swap_turn_right_turn_left: {db}");
            out.push(check(9, d9, if ok_a && ok_b { Pass } else { Fail }, detail));
        }
        _ => out.push(check(
            9,
            d9,
            NotApplicable,
            "needs both swap baselines and the mlp2 probe".into(),
        )),
    }

    let d10 = "mlp2 raw accuracy >= linear raw accuracy in all quadrants (soft)";
    match s.final_measurements.first() {
        Some(bs) => {
            let pairs: Option<Vec<(f64, f64)>> = QuadrantSpec::ALL
                .iter()
                .map(|q| {
                    Some((
                        bs.cell(*q, mlp2)?.raw.value,
                        bs.cell(*q, ProbeArchitecture::Linear)?.raw.value,
                    ))
                })
                .collect();
            match pairs {
                Some(p) => {
                    let ok = p.iter().all(|(m, l)| m >= l);
                    let detail = p
                        .iter()
                        .map(|(m, l)| format!("{m:.4} vs {l:.4}"))
                        .collect::<Vec<_>>()
                        .join("; ");
                    out.push(check(10, d10, if ok { Pass } else { Warn }, detail));
                }
                None => out.push(check(
                    10,
                    d10,
                    NotApplicable,
                    "needs the linear and mlp2 probes".into(),
                )),
            }
        }
        None => out.push(check(10, d10, NotApplicable, "no baselines".into())),
    }
    out
}
