mod support;

use gridprobe_core::causal::{MediationVerdict, QuadrantSpec};
use gridprobe_core::experiment::{ExperimentError, Pipeline, SemanticsSpec, Stage, StageOutcome};
use std::collections::BTreeMap;

fn quiet(cfg: gridprobe_core::experiment::ExperimentConfig) -> Pipeline {
    Pipeline::new(cfg).unwrap().quiet(true)
}

#[test]
fn smoke_run_produces_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let p = quiet(support::smoke_config(dir.path()));
    let first = p.run_all().unwrap();
    assert!(
        first.iter().all(|(_, o)| *o == StageOutcome::Executed),
        "{first:?}"
    );

    let root = dir.path();
    for f in [
        "data/train_identity.jsonl",
        "data/train_cycle3.jsonl",
        "data/aux_swap_turn_right_turn_left.jsonl",
        "data/heldout_identity.jsonl",
        "lm/identity/checkpoints.json",
        "lm/identity/train_log.csv",
        "lm/identity/generation.json",
        "lm/cycle3/generation.json",
        "mediation/reports.json",
        "report/summary.md",
        "report/summary.json",
    ] {
        assert!(root.join(f).is_file(), "missing {f}");
    }
    for stage in Stage::ALL {
        assert!(root
            .join("stamps")
            .join(format!("{}.json", stage.name()))
            .is_file());
    }

    let summary = p.summary().unwrap();
    let archs = p.config().probe.architectures.len();
    let steps: Vec<u64> = {
        let text = std::fs::read_to_string(root.join("lm/identity/generation.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["checkpoints"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["step"].as_u64().unwrap())
            .collect()
    };
    assert_eq!(*steps.last().unwrap(), summary.final_step);
    for b in &summary.baselines {
        for q in QuadrantSpec::ALL {
            let csv = std::fs::read_to_string(
                root.join("report").join(b).join(format!("{}.csv", q.id())),
            )
            .unwrap();
            let rows: Vec<&str> = csv.lines().collect();
            assert_eq!(
                rows[0],
                "checkpoint_step,architecture,raw_acc,mediated,ci_lo,ci_hi"
            );
            assert_eq!(rows.len() - 1, archs * steps.len(), "{b} {}", q.id());
        }
    }
    let cycle = summary.baseline("cycle3").unwrap();
    assert!(cycle.lm_trained);
    assert_eq!(cycle.cells.len(), 4 * archs);
    assert!(cycle.cells.iter().any(|c| c.raw.value > 0.0));
    assert!(
        !summary
            .baseline("swap_turn_right_turn_left")
            .unwrap()
            .lm_trained
    );

    let again = p.run_all().unwrap();
    assert!(
        again.iter().all(|(_, o)| *o == StageOutcome::Skipped),
        "{again:?}"
    );

    std::fs::remove_file(root.join("mediation/reports.json")).unwrap();
    let summary_before = std::fs::read(root.join("report/summary.json")).unwrap();
    let outcomes: BTreeMap<&str, StageOutcome> = p
        .run_all()
        .unwrap()
        .into_iter()
        .map(|(s, o)| (s.name(), o))
        .collect();
    for s in ["gen-data", "train-lm", "extract", "probe-quadrants"] {
        assert_eq!(outcomes[s], StageOutcome::Skipped, "{s}");
    }
    assert_eq!(outcomes["mediate"], StageOutcome::Executed);
    assert!(root.join("mediation/reports.json").is_file());
    assert_eq!(
        std::fs::read(root.join("report/summary.json")).unwrap(),
        summary_before
    );
}

#[test]
fn non_bijective_tables_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = support::smoke_config(&dir.path().join("run"));
    let mut table = BTreeMap::new();
    table.insert("move".to_string(), "turn_left".to_string());
    table.insert("turn_left".to_string(), "turn_left".to_string());
    cfg.baselines.push(SemanticsSpec::Table(table));
    match Pipeline::new(cfg) {
        Err(e @ ExperimentError::Config(_)) => assert_eq!(e.exit_code(), 2),
        other => panic!(
            "expected a configuration error, got {:?}",
            other.map(|_| ())
        ),
    }
    assert!(!dir.path().join("run").exists());
}

#[test]
fn identity_baseline_mediates_exactly_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = support::smoke_config(dir.path());
    cfg.baselines = vec!["identity".into()];
    cfg.baseline_lms = Vec::new();
    let p = quiet(cfg);
    p.run_all().unwrap();
    let records = p.mediation_records().unwrap();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r.report.lower_bound.value, 0.0);
        assert_eq!(
            (r.report.lower_bound.ci_lo, r.report.lower_bound.ci_hi),
            (0.0, 0.0)
        );
        assert_eq!(r.report.verdict, MediationVerdict::Inconclusive);
    }
    let summary = p.summary().unwrap();
    for c in &summary.baseline("identity").unwrap().cells {
        assert_eq!(c.mediated.value, 0.0);
        assert_eq!(c.raw, c.baseline);
    }
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = support::smoke_config(dir.path());
    cfg.baselines = vec!["cycle3".into()];
    cfg.probe.architectures.truncate(1);
    let p = quiet(cfg);
    assert!(matches!(
        p.summary(),
        Err(ExperimentError::MissingResults(_))
    ));
    assert_eq!(p.run_stage(Stage::GenData).unwrap(), StageOutcome::Executed);
    assert_eq!(p.run_stage(Stage::GenData).unwrap(), StageOutcome::Skipped);
    for s in &Stage::ALL[1..] {
        assert_eq!(p.run_stage(*s).unwrap(), StageOutcome::Executed, "{s}");
    }
    assert_eq!(Stage::from_name("probe"), Some(Stage::ProbeQuadrants));
    assert_eq!(p.summary().unwrap().baselines, vec!["cycle3".to_string()]);
}
