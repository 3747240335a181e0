use gridprobe_core::gridworld::{Direction, LatentLabel};
use gridprobe_core::probes::{
    encode_label, eval_probe, head_correctness, predictions_from_logits, summarize, train_probe,
    ProbeArchitecture, ProbeConfig, ProbeData, HEAD_SIZES, NUM_OUTPUTS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<LatentLabel> {
    (0..n)
        .map(|_| LatentLabel {
            row: rng.gen_range(0..8),
            col: rng.gen_range(0..8),
            dir: Direction::ALL[rng.gen_range(0..4)],
            facing_blocked: rng.gen_bool(0.5),
        })
        .collect()
}

fn one_hot(labels: &[LatentLabel]) -> Vec<f32> {
    let mut f = vec![0.0f32; labels.len() * NUM_OUTPUTS];
    for (i, l) in labels.iter().enumerate() {
        let mut off = 0;
        for (h, class) in encode_label(l).into_iter().enumerate() {
            f[i * NUM_OUTPUTS + off + class] = 1.0;
            off += HEAD_SIZES[h];
        }
    }
    f
}

fn config(architecture: ProbeArchitecture, steps: u64, seed: u64) -> ProbeConfig {
    ProbeConfig {
        architecture,
        steps,
        seed,
        ..ProbeConfig::default()
    }
}

#[test]
fn one_hot_labels_are_read_off_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = random_labels(&mut rng, 4000);
    let features = one_hot(&labels);
    let rows: Vec<usize> = (0..labels.len()).collect();
    let data = ProbeData {
        dim: NUM_OUTPUTS,
        features: &features,
        labels: &labels,
        rows: &rows,
    };
    for arch in [ProbeArchitecture::Linear, ProbeArchitecture::Mlp1] {
        let probe = train_probe(&data, &config(arch, 600, 2)).unwrap();
        let acc = eval_probe(&probe, &data, "calibration").unwrap();
        assert!(acc.aggregate >= 0.99, "{arch}: {}", acc.aggregate);
    }
}

#[test]
fn features_unrelated_to_labels_give_chance_accuracy() {
    // Heads are drawn independently with skewed marginals, so the best
    // label-blind guess scores the product of the majority-class rates.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 25_000;
    let pick = |rng: &mut ChaCha8Rng, weights: &[f64]| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    };
    let row_w = [0.5, 0.2, 0.1, 0.05, 0.05, 0.04, 0.03, 0.03];
    let dir_w = [0.6, 0.2, 0.1, 0.1];
    let labels: Vec<LatentLabel> = (0..n)
        .map(|_| LatentLabel {
            row: pick(&mut rng, &row_w),
            col: pick(&mut rng, &row_w),
            dir: Direction::ALL[pick(&mut rng, &dir_w)],
            facing_blocked: rng.gen_bool(0.2),
        })
        .collect();
    let dim = 16;
    let features: Vec<f32> = (0..n * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let cal: Vec<usize> = (0..20_000).collect();
    let meas: Vec<usize> = (20_000..n).collect();
    let probe = train_probe(
        &ProbeData {
            dim,
            features: &features,
            labels: &labels,
            rows: &cal,
        },
        &config(ProbeArchitecture::Linear, 1500, 4),
    )
    .unwrap();
    let acc = eval_probe(
        &probe,
        &ProbeData {
            dim,
            features: &features,
            labels: &labels,
            rows: &meas,
        },
        "measurement",
    )
    .unwrap();
    let majority = |f: &dyn Fn(&LatentLabel) -> usize, k: usize| {
        let mut c = vec![0usize; k];
        for &r in &meas {
            c[f(&labels[r])] += 1;
        }
        *c.iter().max().unwrap() as f64 / meas.len() as f64
    };
    let chance = majority(&|l| l.row, 8)
        * majority(&|l| l.col, 8)
        * majority(&|l| l.dir.index(), 4)
        * majority(&|l| l.facing_blocked as usize, 2);
    assert!(
        (acc.aggregate - chance).abs() < 0.02,
        "aggregate {} vs chance {chance}",
        acc.aggregate
    );
}

#[test]
fn probe_training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = random_labels(&mut rng, 600);
    let features: Vec<f32> = (0..600 * 8)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let rows: Vec<usize> = (0..600).collect();
    let data = ProbeData {
        dim: 8,
        features: &features,
        labels: &labels,
        rows: &rows,
    };
    for arch in ProbeArchitecture::ALL {
        let a = train_probe(&data, &config(arch, 30, 6)).unwrap();
        let b = train_probe(&data, &config(arch, 30, 6)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = train_probe(&data, &config(arch, 30, 7)).unwrap();
        assert_ne!(a.params(), c.params());
    }
}

#[test]
fn perfect_and_constant_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = random_labels(&mut rng, 10_000);
    let features = vec![0.0f32; labels.len()];
    let rows: Vec<usize> = (0..labels.len()).collect();
    let data = ProbeData {
        dim: 1,
        features: &features,
        labels: &labels,
        rows: &rows,
    };

    let truth: Vec<[usize; 4]> = labels.iter().map(encode_label).collect();
    let perfect = summarize(&head_correctness(&truth, &data), "m");
    assert_eq!(perfect.aggregate, 1.0);

    let constant = vec![[0usize, 0, 2, 0]; labels.len()];
    let c = summarize(&head_correctness(&constant, &data), "m");
    let sigma = (0.25f64 * 0.75 / labels.len() as f64).sqrt();
    assert!(
        (c.per_head.dir - 0.25).abs() < 4.0 * sigma,
        "dir accuracy {}",
        c.per_head.dir
    );
}

#[test]
fn mismatched_inputs_are_rejected() {
    let labels = vec![
        LatentLabel {
            row: 0,
            col: 0,
            dir: Direction::North,
            facing_blocked: true
        };
        4
    ];
    let features = vec![0.0f32; 7];
    let rows = vec![0usize, 1];
    let data = ProbeData {
        dim: 2,
        features: &features,
        labels: &labels,
        rows: &rows,
    };
    assert!(train_probe(&data, &config(ProbeArchitecture::Linear, 5, 0)).is_err());
    let features = vec![0.0f32; 8];
    let empty: Vec<usize> = Vec::new();
    let data = ProbeData {
        dim: 2,
        features: &features,
        labels: &labels,
        rows: &empty,
    };
    assert!(train_probe(&data, &config(ProbeArchitecture::Linear, 5, 0)).is_err());
}

proptest! {
    #[test]
    fn aggregate_never_exceeds_a_head(correct in prop::collection::vec(prop::array::uniform4(any::<bool>()), 1..200)) {
        let a = summarize(&correct, "m");
        for h in a.per_head.as_array() {
            prop_assert!(a.aggregate <= h);
        }
    }

    #[test]
    fn positive_rescaling_keeps_every_argmax(
        logits in prop::collection::vec(-50.0f32..50.0, NUM_OUTPUTS * 6),
        scale in 0.01f32..100.0,
    ) {
        let scaled: Vec<f32> = logits.iter().map(|v| v * scale).collect();
        prop_assert_eq!(predictions_from_logits(&logits), predictions_from_logits(&scaled));
    }
}
