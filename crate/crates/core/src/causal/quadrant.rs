//! Probe measurements over the calibration/measurement × bound/free grid,
//! and the mediated measurement `acc(M, M) − acc(M, M')` with a paired
//! bootstrap interval.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CausalError, Estimate};
use crate::corpus::{split_role, Binding, Dataset, SplitRole};
use crate::gridworld::LatentLabel;
use crate::lm::{extract_dataset, FeatureMatrix, LmModel};
use crate::probes::{head_correctness, train_probe, HeadAccuracies, ProbeConfig, ProbeData};
use crate::seed;

/// One cell of the calibration/measurement grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuadrantSpec {
    pub calibration: Binding,
    pub measurement: Binding,
}

impl QuadrantSpec {
    pub const ALL: [QuadrantSpec; 4] = [
        QuadrantSpec {
            calibration: Binding::Bound,
            measurement: Binding::Bound,
        },
        QuadrantSpec {
            calibration: Binding::Bound,
            measurement: Binding::Free,
        },
        QuadrantSpec {
            calibration: Binding::Free,
            measurement: Binding::Bound,
        },
        QuadrantSpec {
            calibration: Binding::Free,
            measurement: Binding::Free,
        },
    ];

    /// Interpretation of the cell.
    pub fn name(&self) -> &'static str {
        match (self.calibration, self.measurement) {
            (Binding::Bound, Binding::Bound) => "deductive knowledge",
            (Binding::Bound, Binding::Free) => "inductive bias (inference)",
            (Binding::Free, Binding::Bound) => "deductive bias (consistency)",
            (Binding::Free, Binding::Free) => "inductive knowledge",
        }
    }

    /// File-name friendly identifier.
    pub fn id(&self) -> &'static str {
        match (self.calibration, self.measurement) {
            (Binding::Bound, Binding::Bound) => "deductive_knowledge",
            (Binding::Bound, Binding::Free) => "inductive_bias",
            (Binding::Free, Binding::Bound) => "deductive_bias",
            (Binding::Free, Binding::Free) => "inductive_knowledge",
        }
    }
}

fn binding_name(b: Binding) -> &'static str {
    match b {
        Binding::Bound => "bound",
        Binding::Free => "free",
    }
}

/// Split identifier such as `calibration/bound`.
pub fn split_name(role: SplitRole, binding: Binding) -> String {
    let r = match role {
        SplitRole::Calibration => "calibration",
        SplitRole::Measurement => "measurement",
    };
    format!("{r}/{}", binding_name(binding))
}

/// LM representations of an auxiliary dataset, one row per
/// `(sample, state)`, with the labels and split tags of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTable {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<LatentLabel>,
    pub keys: Vec<(u64, u8)>,
    pub binding: Vec<Binding>,
    pub role: Vec<SplitRole>,
}

impl ProbeTable {
    /// Pairs extracted features with the dataset they came from. Rows must
    /// follow the dataset in sample order then state order.
    pub fn new(features: FeatureMatrix, dataset: &Dataset) -> Result<Self, CausalError> {
        let mut labels = Vec::with_capacity(features.rows());
        let mut binding = Vec::with_capacity(features.rows());
        let mut role = Vec::with_capacity(features.rows());
        let mut keys = features.keys.iter();
        for s in &dataset.samples {
            for i in 1..=s.program_len() {
                match keys.next() {
                    Some(&(id, idx)) if id == s.id && idx as usize == i => {}
                    other => {
                        return Err(CausalError::Misaligned(format!(
                            "expected ({}, {i}), found {other:?}",
                            s.id
                        )))
                    }
                }
                labels.push(s.labels[i - 1]);
                binding.push(if s.bound_mask[i - 1] {
                    Binding::Bound
                } else {
                    Binding::Free
                });
                role.push(split_role(s.id));
            }
        }
        if keys.next().is_some() {
            return Err(CausalError::Misaligned(
                "more feature rows than dataset states".into(),
            ));
        }
        Ok(Self {
            dim: features.dim,
            features: features.data,
            labels,
            keys: features.keys,
            binding,
            role,
        })
    }

    /// Extracts representations of `dataset` with `model`.
    pub fn extract(model: &LmModel, dataset: &Dataset) -> Result<Self, CausalError> {
        Self::new(extract_dataset(model, dataset)?, dataset)
    }

    pub fn rows(&self, role: SplitRole, binding: Binding) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&r| self.role[r] == role && self.binding[r] == binding)
            .collect()
    }

    pub fn data<'a>(&'a self, rows: &'a [usize]) -> ProbeData<'a> {
        ProbeData {
            dim: self.dim,
            features: &self.features,
            labels: &self.labels,
            rows,
        }
    }
}

/// Measurement-split results of probes sharing one calibration split,
/// averaged over probe seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// `(sample_id, state_index)` of every measured item.
    pub keys: Vec<(u64, u8)>,
    /// Fraction of seeds with all heads right, per item.
    pub correct: Vec<f64>,
    pub per_head: HeadAccuracies,
    pub aggregate: f64,
}

/// Trains one probe per calibration split and seed on `table`, and scores
/// every probe on both measurement splits.
pub fn probe_scores(
    table: &ProbeTable,
    config: &ProbeConfig,
    seeds: &[u64],
) -> Result<BTreeMap<QuadrantSpec, Scores>, CausalError> {
    if seeds.is_empty() {
        return Err(CausalError::Config(
            "at least one probe seed is needed".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for calibration in [Binding::Bound, Binding::Free] {
        let cal_rows = table.rows(SplitRole::Calibration, calibration);
        let meas: Vec<(Binding, Vec<usize>)> = [Binding::Bound, Binding::Free]
            .into_iter()
            .map(|b| (b, table.rows(SplitRole::Measurement, b)))
            .collect();
        let mut acc: Vec<(Vec<f64>, [f64; 4], f64)> = meas
            .iter()
            .map(|(_, r)| (vec![0.0; r.len()], [0.0; 4], 0.0))
            .collect();
        for &s in seeds {
            let cfg = ProbeConfig {
                seed: s,
                ..config.clone()
            };
            let probe = train_probe(&table.data(&cal_rows), &cfg)?;
            for ((_, rows), (correct, heads, agg)) in meas.iter().zip(acc.iter_mut()) {
                let data = table.data(rows);
                data.check()?;
                let c = head_correctness(&probe.predict(&data)?, &data);
                let n = c.len() as f64;
                for (slot, item) in correct.iter_mut().zip(&c) {
                    *slot += item.iter().all(|&b| b) as u8 as f64;
                }
                for h in 0..4 {
                    heads[h] += c.iter().filter(|x| x[h]).count() as f64 / n;
                }
                *agg += c.iter().filter(|x| x.iter().all(|&b| b)).count() as f64 / n;
            }
        }
        let k = seeds.len() as f64;
        for ((measurement, rows), (mut correct, heads, agg)) in meas.into_iter().zip(acc) {
            correct.iter_mut().for_each(|c| *c /= k);
            let per_head = HeadAccuracies {
                row: heads[0] / k,
                col: heads[1] / k,
                dir: heads[2] / k,
                facing_blocked: heads[3] / k,
            };
            let keys = rows.iter().map(|&r| table.keys[r]).collect();
            out.insert(
                QuadrantSpec {
                    calibration,
                    measurement,
                },
                Scores {
                    keys,
                    correct,
                    per_head,
                    aggregate: agg / k,
                },
            );
        }
    }
    Ok(out)
}

/// Per-sample sums `(Σ a, Σ b, count)` over the measured items, keyed by
/// sample id. Both score sets must cover the same `(sample, state)` items.
fn cluster_sums(a: &Scores, b: &Scores) -> Result<Vec<(f64, f64, f64)>, CausalError> {
    if a.keys != b.keys {
        return Err(CausalError::Misaligned(format!(
            "score sets over different items ({} vs {})",
            a.keys.len(),
            b.keys.len()
        )));
    }
    let mut sums: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for ((key, ca), cb) in a.keys.iter().zip(&a.correct).zip(&b.correct) {
        let e = sums.entry(key.0).or_default();
        e.0 += ca;
        e.1 += cb;
        e.2 += 1.0;
    }
    Ok(sums.into_values().collect())
}

/// Percentile bootstrap over samples (all states of a sample move together)
/// of `Σ a / Σ n − Σ b / Σ n`.
fn bootstrap(clusters: &[(f64, f64, f64)], resamples: usize, rng_seed: u64, tag: &str) -> Estimate {
    let total = |it: &mut dyn Iterator<Item = &(f64, f64, f64)>| {
        let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
        for c in it {
            sa += c.0;
            sb += c.1;
            n += c.2;
        }
        if n == 0.0 {
            0.0
        } else {
            sa / n - sb / n
        }
    };
    let value = total(&mut clusters.iter());
    let items = clusters.iter().map(|c| c.2).sum::<f64>() as usize;
    if clusters.is_empty() || resamples == 0 {
        return Estimate {
            value,
            ci_lo: value,
            ci_hi: value,
            n: items,
        };
    }
    let mut rng = seed::rng(rng_seed, tag, 0);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut pick = (0..clusters.len()).map(|_| &clusters[rng.gen_range(0..clusters.len())]);
            total(&mut pick)
        })
        .collect();
    stats.sort_by(|x, y| x.total_cmp(y));
    let at = |q: f64| stats[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Estimate {
        value,
        ci_lo: at(0.025),
        ci_hi: at(0.975),
        n: items,
    }
}

/// Accuracy with a sample-level bootstrap interval.
pub fn bootstrap_accuracy(scores: &Scores, resamples: usize, rng_seed: u64) -> Estimate {
    let mut sums: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for (key, &c) in scores.keys.iter().zip(&scores.correct) {
        let e = sums.entry(key.0).or_default();
        e.0 += c;
        e.2 += 1.0;
    }
    bootstrap(
        &sums.into_values().collect::<Vec<_>>(),
        resamples,
        rng_seed,
        "causal/bootstrap/accuracy",
    )
}

/// Paired bootstrap of the accuracy difference `a − b` over shared items.
pub fn bootstrap_difference(
    a: &Scores,
    b: &Scores,
    resamples: usize,
    rng_seed: u64,
) -> Result<Estimate, CausalError> {
    Ok(bootstrap(
        &cluster_sums(a, b)?,
        resamples,
        rng_seed,
        "causal/bootstrap/difference",
    ))
}

/// Raw and mediated measurement of one quadrant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantMeasurement {
    pub quadrant: QuadrantSpec,
    /// `acc(M, M)`.
    pub raw: Estimate,
    /// `acc(M, M')`.
    pub baseline: Estimate,
    /// `acc(M, M) − acc(M, M')`.
    pub mediated: Estimate,
    pub raw_per_head: HeadAccuracies,
    pub baseline_per_head: HeadAccuracies,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            seed: 0,
        }
    }
}

/// The 2×2 grid for one LM and probe configuration. `table_m` holds the
/// LM's representations of the `M` auxiliary dataset and `table_mp` those of
/// the `M'` dataset. Probe seeds are shared by the two label sources.
pub fn quadrant_measurements(
    table_m: &ProbeTable,
    table_mp: &ProbeTable,
    config: &ProbeConfig,
    seeds: &[u64],
    bootstrap_cfg: BootstrapConfig,
) -> Result<Vec<QuadrantMeasurement>, CausalError> {
    let sm = probe_scores(table_m, config, seeds)?;
    let smp = if table_mp == table_m {
        sm.clone()
    } else {
        probe_scores(table_mp, config, seeds)?
    };
    QuadrantSpec::ALL
        .iter()
        .map(|q| {
            let (a, b) = (&sm[q], &smp[q]);
            Ok(QuadrantMeasurement {
                quadrant: *q,
                raw: bootstrap_accuracy(a, bootstrap_cfg.resamples, bootstrap_cfg.seed),
                baseline: bootstrap_accuracy(b, bootstrap_cfg.resamples, bootstrap_cfg.seed),
                mediated: bootstrap_difference(a, b, bootstrap_cfg.resamples, bootstrap_cfg.seed)?,
                raw_per_head: a.per_head,
                baseline_per_head: b.per_head,
            })
        })
        .collect()
}

/// `acc(M, M) − acc(M, M')` for one quadrant at one checkpoint.
pub fn mediated_measurement(
    model: &LmModel,
    aux_m: &Dataset,
    aux_mp: &Dataset,
    quadrant: QuadrantSpec,
    config: &ProbeConfig,
    seeds: &[u64],
    bootstrap_cfg: BootstrapConfig,
) -> Result<Estimate, CausalError> {
    let tm = ProbeTable::extract(model, aux_m)?;
    let tmp = ProbeTable::extract(model, aux_mp)?;
    let all = quadrant_measurements(&tm, &tmp, config, seeds, bootstrap_cfg)?;
    Ok(all
        .into_iter()
        .find(|m| m.quadrant == quadrant)
        .expect("every quadrant is measured")
        .mediated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_names() {
        let names: Vec<&str> = QuadrantSpec::ALL.iter().map(|q| q.name()).collect();
        assert_eq!(
            names,
            [
                "deductive knowledge",
                "inductive bias (inference)",
                "deductive bias (consistency)",
                "inductive knowledge"
            ]
        );
    }

    #[test]
    fn bootstrap_of_identical_scores_is_zero() {
        let clusters = vec![(1.0, 1.0, 2.0), (0.5, 0.5, 1.0), (0.0, 0.0, 3.0)];
        let e = bootstrap(&clusters, 200, 1, "t");
        assert_eq!((e.value, e.ci_lo, e.ci_hi), (0.0, 0.0, 0.0));
        assert_eq!(e.n, 6);
    }

    #[test]
    fn bootstrap_interval_brackets_a_clear_effect() {
        let clusters: Vec<(f64, f64, f64)> = (0..400)
            .map(|i| {
                (
                    if i % 10 < 8 { 1.0 } else { 0.0 },
                    if i % 10 < 3 { 1.0 } else { 0.0 },
                    1.0,
                )
            })
            .collect();
        let e = bootstrap(&clusters, 500, 2, "t");
        assert!((e.value - 0.5).abs() < 1e-12);
        assert!(e.ci_lo > 0.4 && e.ci_hi < 0.6 && e.ci_lo < e.value && e.value < e.ci_hi);
    }
}
