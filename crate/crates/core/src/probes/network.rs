//! Probe network: `[Linear → ReLU → BatchNorm → Dropout]*` then a linear
//! output layer holding the four heads side by side.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{encode_label, ProbeConfig, ProbeData, ProbeError, HEAD_SIZES, NUM_OUTPUTS};
use crate::nn::{
    accumulate_col_sums, add_bias, argmax, cross_entropy_grad, gemm, AdamW, AdamWConfig,
    LrSchedule, ParamGroup,
};
use crate::seed;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
struct HiddenLayer {
    input: usize,
    output: usize,
    w: Range<usize>,
    b: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    config: ProbeConfig,
    input_dim: usize,
    hidden: Vec<HiddenLayer>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    params: Vec<f32>,
    running_mean: Vec<Vec<f32>>,
    running_var: Vec<Vec<f32>>,
}

struct HiddenCache {
    pre: Vec<f32>,
    xhat: Vec<f32>,
    rstd: Vec<f32>,
    mask: Option<Vec<f32>>,
    out: Vec<f32>,
}

impl ProbeModel {
    fn init(config: &ProbeConfig, input_dim: usize) -> Self {
        let mut params = Vec::new();
        let mut take = |n: usize| {
            let r = params.len()..params.len() + n;
            params.resize(r.end, 0.0);
            r
        };
        let mut hidden = Vec::new();
        let mut fan_in = input_dim;
        for &h in config.architecture.hidden_dims() {
            hidden.push(HiddenLayer {
                input: fan_in,
                output: h,
                w: take(fan_in * h),
                b: take(h),
                gamma: take(h),
                beta: take(h),
            });
            fan_in = h;
        }
        let out_w = take(fan_in * NUM_OUTPUTS);
        let out_b = take(NUM_OUTPUTS);

        let mut rng = seed::rng(config.seed, "probe/init", 0);
        let mut uniform = |params: &mut [f32], fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            params
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..bound));
        };
        for l in &hidden {
            uniform(&mut params[l.w.clone()], l.input);
            uniform(&mut params[l.b.clone()], l.input);
            params[l.gamma.clone()].fill(1.0);
        }
        uniform(&mut params[out_w.clone()], fan_in);
        uniform(&mut params[out_b.clone()], fan_in);

        let running_mean = hidden.iter().map(|l| vec![0.0; l.output]).collect();
        let running_var = hidden.iter().map(|l| vec![1.0; l.output]).collect();
        Self {
            config: config.clone(),
            input_dim,
            hidden,
            out_w,
            out_b,
            params,
            running_mean,
            running_var,
        }
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn gather(data: &ProbeData, rows: &[usize]) -> Vec<f32> {
        let mut x = Vec::with_capacity(rows.len() * data.dim);
        for &r in rows {
            x.extend_from_slice(data.feature(r));
        }
        x
    }

    /// Forward pass. With `train` set, batch statistics are used (and the
    /// running estimates updated) and dropout is applied with `rng`.
    fn forward(
        &mut self,
        x: &[f32],
        n: usize,
        train: Option<&mut ChaCha8Rng>,
    ) -> (Vec<HiddenCache>, Vec<f32>) {
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut rng = train;
        let is_train = rng.is_some();
        for (li, l) in self.hidden.iter().enumerate() {
            let input: &[f32] = caches
                .last()
                .map(|c: &HiddenCache| c.out.as_slice())
                .unwrap_or(x);
            let o = l.output;
            let mut pre = vec![0.0f32; n * o];
            gemm(
                n,
                l.input,
                o,
                1.0,
                input,
                l.input,
                false,
                &self.params[l.w.clone()],
                o,
                false,
                0.0,
                &mut pre,
                o,
            );
            add_bias(&mut pre, &self.params[l.b.clone()]);
            let act: Vec<f32> = pre.iter().map(|&v| v.max(0.0)).collect();

            let (mean, var) = if is_train {
                let mut mean = vec![0.0f32; o];
                accumulate_col_sums(&act, &mut mean);
                mean.iter_mut().for_each(|m| *m /= n as f32);
                let mut var = vec![0.0f32; o];
                for row in act.chunks_exact(o) {
                    for j in 0..o {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f32);
                let unbias = if n > 1 {
                    n as f32 / (n - 1) as f32
                } else {
                    1.0
                };
                for j in 0..o {
                    self.running_mean[li][j] =
                        (1.0 - BN_MOMENTUM) * self.running_mean[li][j] + BN_MOMENTUM * mean[j];
                    self.running_var[li][j] = (1.0 - BN_MOMENTUM) * self.running_var[li][j]
                        + BN_MOMENTUM * var[j] * unbias;
                }
                (mean, var)
            } else {
                (self.running_mean[li].clone(), self.running_var[li].clone())
            };
            let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &self.params[l.gamma.clone()];
            let beta = &self.params[l.beta.clone()];
            let mut xhat = act;
            let mut out = vec![0.0f32; n * o];
            for (hr, or) in xhat.chunks_exact_mut(o).zip(out.chunks_exact_mut(o)) {
                for j in 0..o {
                    hr[j] = (hr[j] - mean[j]) * rstd[j];
                    or[j] = hr[j] * gamma[j] + beta[j];
                }
            }
            let mask = match rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => {
                    let p = self.config.dropout;
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f32> = (0..n * o)
                        .map(|_| if r.gen::<f32>() < p { 0.0 } else { keep })
                        .collect();
                    out.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            caches.push(HiddenCache {
                pre,
                xhat,
                rstd,
                mask,
                out,
            });
        }
        let last: &[f32] = caches.last().map(|c| c.out.as_slice()).unwrap_or(x);
        let fan_in = self
            .hidden
            .last()
            .map(|l| l.output)
            .unwrap_or(self.input_dim);
        let mut logits = vec![0.0f32; n * NUM_OUTPUTS];
        gemm(
            n,
            fan_in,
            NUM_OUTPUTS,
            1.0,
            last,
            fan_in,
            false,
            &self.params[self.out_w.clone()],
            NUM_OUTPUTS,
            false,
            0.0,
            &mut logits,
            NUM_OUTPUTS,
        );
        add_bias(&mut logits, &self.params[self.out_b.clone()]);
        (caches, logits)
    }

    /// Summed four-head cross-entropy (mean over the batch) and its gradient.
    fn loss_and_grad(
        &self,
        x: &[f32],
        targets: &[[usize; 4]],
        caches: &[HiddenCache],
        mut logits: Vec<f32>,
        grads: &mut [f32],
    ) -> f32 {
        let n = targets.len();
        let inv = 1.0 / n as f32;
        grads.fill(0.0);
        let mut loss = 0.0f32;
        for (row, t) in logits.chunks_exact_mut(NUM_OUTPUTS).zip(targets) {
            let mut off = 0;
            for (h, &size) in HEAD_SIZES.iter().enumerate() {
                loss += cross_entropy_grad(&mut row[off..off + size], t[h], inv);
                off += size;
            }
        }
        let dlogits = logits;
        let fan_in = self
            .hidden
            .last()
            .map(|l| l.output)
            .unwrap_or(self.input_dim);
        let last: &[f32] = caches.last().map(|c| c.out.as_slice()).unwrap_or(x);
        gemm(
            fan_in,
            n,
            NUM_OUTPUTS,
            1.0,
            last,
            fan_in,
            true,
            &dlogits,
            NUM_OUTPUTS,
            false,
            0.0,
            &mut grads[self.out_w.clone()],
            NUM_OUTPUTS,
        );
        accumulate_col_sums(&dlogits, &mut grads[self.out_b.clone()]);
        if self.hidden.is_empty() {
            return loss * inv;
        }
        let mut dout = vec![0.0f32; n * fan_in];
        gemm(
            n,
            NUM_OUTPUTS,
            fan_in,
            1.0,
            &dlogits,
            NUM_OUTPUTS,
            false,
            &self.params[self.out_w.clone()],
            NUM_OUTPUTS,
            true,
            0.0,
            &mut dout,
            fan_in,
        );

        for (li, l) in self.hidden.iter().enumerate().rev() {
            let c = &caches[li];
            let o = l.output;
            if let Some(m) = &c.mask {
                dout.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
            }
            let gamma = &self.params[l.gamma.clone()];
            let mut dgamma = vec![0.0f32; o];
            let mut dbeta = vec![0.0f32; o];
            let mut sum_dxhat = vec![0.0f32; o];
            let mut sum_dxhat_xhat = vec![0.0f32; o];
            for (dr, hr) in dout.chunks_exact(o).zip(c.xhat.chunks_exact(o)) {
                for j in 0..o {
                    dgamma[j] += dr[j] * hr[j];
                    dbeta[j] += dr[j];
                    let dx = dr[j] * gamma[j];
                    sum_dxhat[j] += dx;
                    sum_dxhat_xhat[j] += dx * hr[j];
                }
            }
            grads[l.gamma.clone()].copy_from_slice(&dgamma);
            grads[l.beta.clone()].copy_from_slice(&dbeta);
            // Through batch normalization, then the ReLU.
            let nf = n as f32;
            let mut dpre = vec![0.0f32; n * o];
            for ((dp, dr), (hr, pr)) in dpre
                .chunks_exact_mut(o)
                .zip(dout.chunks_exact(o))
                .zip(c.xhat.chunks_exact(o).zip(c.pre.chunks_exact(o)))
            {
                for j in 0..o {
                    let dxhat = dr[j] * gamma[j];
                    let da =
                        c.rstd[j] / nf * (nf * dxhat - sum_dxhat[j] - hr[j] * sum_dxhat_xhat[j]);
                    dp[j] = if pr[j] > 0.0 { da } else { 0.0 };
                }
            }
            let input: &[f32] = if li == 0 { x } else { &caches[li - 1].out };
            gemm(
                l.input,
                n,
                o,
                1.0,
                input,
                l.input,
                true,
                &dpre,
                o,
                false,
                0.0,
                &mut grads[l.w.clone()],
                o,
            );
            accumulate_col_sums(&dpre, &mut grads[l.b.clone()]);
            if li > 0 {
                let mut din = vec![0.0f32; n * l.input];
                gemm(
                    n,
                    o,
                    l.input,
                    1.0,
                    &dpre,
                    o,
                    false,
                    &self.params[l.w.clone()],
                    o,
                    true,
                    0.0,
                    &mut din,
                    l.input,
                );
                dout = din;
            }
        }
        loss * inv
    }

    pub(super) fn train(data: &ProbeData, config: &ProbeConfig) -> Result<Self, ProbeError> {
        config.validate()?;
        data.check()?;
        let mut model = Self::init(config, data.dim);
        let groups = [ParamGroup {
            range: 0..model.params.len(),
            decay: true,
        }];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            model.params.len(),
        );
        let schedule = LrSchedule::MultiStep {
            lr: config.learning_rate,
            milestones: ProbeConfig::LR_MILESTONES.to_vec(),
            gamma: ProbeConfig::LR_GAMMA,
            total_steps: config.steps,
        };
        let mut order_rng = seed::rng(config.seed, "probe/order", 0);
        let mut dropout_rng = seed::rng(config.seed, "probe/dropout", 0);
        let mut order: Vec<usize> = data.rows.to_vec();
        order.shuffle(&mut order_rng);
        let mut pos = 0;
        let batch = config.batch_size.min(order.len());
        let mut grads = vec![0.0f32; model.params.len()];
        let mut rows = Vec::with_capacity(batch);
        for step in 0..config.steps {
            rows.clear();
            while rows.len() < batch {
                if pos == order.len() {
                    order.shuffle(&mut order_rng);
                    pos = 0;
                }
                rows.push(order[pos]);
                pos += 1;
            }
            let x = Self::gather(data, &rows);
            let targets: Vec<[usize; 4]> = rows
                .iter()
                .map(|&r| encode_label(&data.labels[r]))
                .collect();
            let (caches, logits) = model.forward(&x, rows.len(), Some(&mut dropout_rng));
            let loss = model.loss_and_grad(&x, &targets, &caches, logits, &mut grads);
            if !loss.is_finite() {
                return Err(ProbeError::Divergence { step });
            }
            opt.step(&mut model.params, &grads, &groups, schedule.lr_at(step));
        }
        if !model.params.iter().all(|v| v.is_finite()) {
            return Err(ProbeError::Divergence { step: config.steps });
        }
        Ok(model)
    }

    /// Evaluation-mode logits (`rows × 22`) for the selected rows.
    pub fn logits(&self, data: &ProbeData) -> Result<Vec<f32>, ProbeError> {
        if data.dim != self.input_dim {
            return Err(ProbeError::Mismatch(format!(
                "probe expects dim {}, got {}",
                self.input_dim, data.dim
            )));
        }
        let mut frozen = self.clone();
        let mut out = Vec::with_capacity(data.rows.len() * NUM_OUTPUTS);
        for chunk in data.rows.chunks(EVAL_CHUNK) {
            let x = Self::gather(data, chunk);
            let (_, logits) = frozen.forward(&x, chunk.len(), None);
            out.extend_from_slice(&logits);
        }
        Ok(out)
    }

    /// Per-head argmax predictions for the selected rows.
    pub fn predict(&self, data: &ProbeData) -> Result<Vec<[usize; 4]>, ProbeError> {
        Ok(predictions_from_logits(&self.logits(data)?))
    }
}

/// Per-head argmax of `rows × 22` logits.
pub fn predictions_from_logits(logits: &[f32]) -> Vec<[usize; 4]> {
    logits
        .chunks_exact(NUM_OUTPUTS)
        .map(|row| {
            let mut p = [0usize; 4];
            let mut off = 0;
            for (h, &size) in HEAD_SIZES.iter().enumerate() {
                p[h] = argmax(&row[off..off + size]);
                off += size;
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Direction, LatentLabel};
    use crate::probes::ProbeArchitecture;

    fn toy(n: usize) -> (Vec<f32>, Vec<LatentLabel>) {
        let mut rng = seed::rng(9, "toy", 0);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let l = LatentLabel {
                row: rng.gen_range(0..8),
                col: rng.gen_range(0..8),
                dir: Direction::from_index(rng.gen_range(0..4)).unwrap(),
                facing_blocked: rng.gen(),
            };
            let mut f = vec![0.0f32; 6];
            f[0] = l.row as f32;
            f[1] = l.col as f32;
            f[2] = l.dir.index() as f32;
            f[3] = l.facing_blocked as u8 as f32;
            f[4] = rng.gen();
            f[5] = rng.gen();
            feats.extend(f);
            labels.push(l);
        }
        (feats, labels)
    }

    /// Finite-difference check of the training-mode gradient, BatchNorm
    /// included. Dropout is off so the forward pass is deterministic.
    #[test]
    fn gradients_match_finite_differences() {
        let (feats, labels) = toy(12);
        let rows: Vec<usize> = (0..12).collect();
        let data = ProbeData {
            dim: 6,
            features: &feats,
            labels: &labels,
            rows: &rows,
        };
        let cfg = ProbeConfig {
            architecture: ProbeArchitecture::Mlp1,
            dropout: 0.0,
            ..ProbeConfig::default()
        };
        let mut model = ProbeModel::init(&cfg, 6);
        let x = ProbeModel::gather(&data, &rows);
        let targets: Vec<[usize; 4]> = rows.iter().map(|&r| encode_label(&labels[r])).collect();
        let loss_at = |m: &ProbeModel| {
            let mut m = m.clone();
            let (c, l) = m.forward(&x, rows.len(), Some(&mut seed::rng(0, "unused", 0)));
            let mut g = vec![0.0; m.params.len()];
            m.loss_and_grad(&x, &targets, &c, l, &mut g) as f64
        };
        let mut grads = vec![0.0; model.params.len()];
        {
            let mut m = model.clone();
            let (c, l) = m.forward(&x, rows.len(), Some(&mut seed::rng(0, "unused", 0)));
            m.loss_and_grad(&x, &targets, &c, l, &mut grads);
        }
        let n = model.params.len();
        for idx in (0..n).step_by(97).chain([n - 1, n - 30]) {
            let orig = model.params[idx];
            let eps = 1e-2;
            model.params[idx] = orig + eps;
            let up = loss_at(&model);
            model.params[idx] = orig - eps;
            let down = loss_at(&model);
            model.params[idx] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            let analytic = grads[idx] as f64;
            let err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-2);
            assert!(
                err < 5e-2,
                "param {idx}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn running_statistics_track_batches() {
        let (feats, labels) = toy(64);
        let rows: Vec<usize> = (0..64).collect();
        let data = ProbeData {
            dim: 6,
            features: &feats,
            labels: &labels,
            rows: &rows,
        };
        let cfg = ProbeConfig {
            architecture: ProbeArchitecture::Mlp1,
            steps: 50,
            batch_size: 64,
            ..ProbeConfig::default()
        };
        let m = ProbeModel::train(&data, &cfg).unwrap();
        assert!(m.running_mean[0].iter().any(|&v| v != 0.0));
        // Evaluation does not touch the running estimates.
        let before = m.running_mean.clone();
        m.predict(&data).unwrap();
        assert_eq!(before, m.running_mean);
    }
}
