use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LmError, LmModel};
use crate::nn::{AdamW, AdamWConfig, LrSchedule};
use crate::seed;

const CLIP_NORM: f32 = 1.0;
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f32,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Snapshots in step order, starting with the untrained model.
    pub checkpoints: Vec<LmModel>,
    pub log: Vec<LossRecord>,
}

/// Cycles through the corpus in a fresh seeded permutation every epoch.
struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(seed: u64, len: usize) -> Self {
        let mut order = Self {
            seed,
            len,
            epoch: 0,
            perm: (0..len).collect(),
            pos: 0,
        };
        order.shuffle();
        order
    }

    fn shuffle(&mut self) {
        self.perm = (0..self.len).collect();
        self.perm
            .shuffle(&mut seed::rng(self.seed, "lm/order", self.epoch));
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.len {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Number of optimizer steps needed to see `total_tokens` tokens.
fn planned_steps<T: AsRef<[u8]>>(model: &LmModel, corpus: &[T]) -> u64 {
    let c = model.config();
    let tokens: u64 = corpus.iter().map(|s| s.as_ref().len() as u64).sum();
    let per_step = (tokens as f64 / corpus.len() as f64) * c.batch_size as f64;
    ((c.total_tokens as f64 / per_step).ceil() as u64).max(1)
}

/// Causal-LM training with the configuration carried by `model`. Snapshots are
/// handed to `on_checkpoint` as they are produced: at step 0, every
/// `checkpoint_interval` steps, and at the final step.
pub fn train_lm_with<T, F>(
    mut model: LmModel,
    corpus: &[T],
    mut on_checkpoint: F,
) -> Result<(LmModel, Vec<LossRecord>), LmError>
where
    T: AsRef<[u8]>,
    F: FnMut(&LmModel, &[LossRecord]) -> Result<(), LmError>,
{
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let cfg = model.config().clone();
    let total_steps = planned_steps(&model, corpus);
    let schedule = LrSchedule::WarmupCosine {
        lr: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps.min(total_steps / 10),
        total_steps,
        min_ratio: 0.1,
    };
    let groups = model.layout().param_groups();
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        model.num_params(),
    );
    let mut grads = vec![0.0f32; model.num_params()];
    let mut order = BatchOrder::new(cfg.seed, corpus.len());
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut tokens_seen = 0u64;

    if model.step == 0 {
        on_checkpoint(&model, &log)?;
    }
    for step in model.step..total_steps {
        let idx = order.next_batch(cfg.batch_size);
        let batch: Vec<&[u8]> = idx.iter().map(|&i| corpus[i].as_ref()).collect();
        tokens_seen += batch.iter().map(|s| s.len() as u64).sum::<u64>();
        let mut drop_rng = seed::rng(cfg.seed, "lm/dropout", step);
        let mut cache = model.forward(&batch, Some(&mut drop_rng))?;
        let loss = model.backward(&mut cache, &mut grads);
        if !loss.is_finite() {
            return Err(LmError::Divergence { step, loss });
        }
        let norm = grads.iter().map(|g| g * g).sum::<f32>().sqrt();
        if norm > CLIP_NORM {
            let s = CLIP_NORM / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        opt.step(&mut model.params, &grads, &groups, schedule.lr_at(step));
        model.step = step + 1;
        if !model.all_finite() {
            return Err(LmError::Divergence {
                step,
                loss: f32::NAN,
            });
        }
        log.push(LossRecord {
            step: model.step,
            tokens_seen,
            loss,
        });
        if model.step % cfg.checkpoint_interval == 0 || model.step == total_steps {
            on_checkpoint(&model, &log)?;
        }
    }
    Ok((model, log))
}

pub fn train_lm<T: AsRef<[u8]>>(model: LmModel, corpus: &[T]) -> Result<TrainRun, LmError> {
    let mut checkpoints = Vec::new();
    let (_, log) = train_lm_with(model, corpus, |m, _| {
        checkpoints.push(m.clone());
        Ok(())
    })?;
    Ok(TrainRun { checkpoints, log })
}

/// Mean next-token cross-entropy per predicted token over `corpus`.
pub fn corpus_loss<T: AsRef<[u8]>>(model: &LmModel, corpus: &[T]) -> Result<f64, LmError> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in corpus.chunks(EVAL_CHUNK) {
        let batch: Vec<&[u8]> = chunk.iter().map(|s| s.as_ref()).collect();
        let cache = model.forward(&batch, None)?;
        let (t, n) = model.loss_only(&cache);
        total += t;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_lm, LmConfig};

    #[test]
    fn batch_order_is_a_permutation_per_epoch() {
        let mut o = BatchOrder::new(3, 10);
        let mut first: Vec<usize> = o.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchOrder::new(3, 10);
        assert_eq!(again.next_batch(25), {
            let mut o = BatchOrder::new(3, 10);
            o.next_batch(25)
        });
    }

    #[test]
    fn empty_corpus_rejected() {
        let m = init_lm(
            &LmConfig {
                layers: 1,
                model_dim: 8,
                heads: 2,
                ff_dim: 8,
                ..LmConfig::default()
            },
            0,
        )
        .unwrap();
        let corpus: Vec<Vec<u8>> = Vec::new();
        assert!(matches!(train_lm(m, &corpus), Err(LmError::EmptyCorpus)));
    }
}
