//! AdamW with decoupled weight decay, and learning-rate schedules.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// A contiguous slice of the flat parameter vector and whether weight decay
/// applies to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every group. Parameters outside all groups are left
    /// untouched.
    ///
    /// ```text
    /// θ ← θ − lr·λ·θ                      (decayed groups only)
    /// m ← β1·m + (1 − β1)·g
    /// v ← β2·v + (1 − β2)·g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε)
    /// ```
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], groups: &[ParamGroup], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = lr / bc1;
        let inv_bc2_sqrt = 1.0 / bc2.sqrt();
        for group in groups {
            let decay = if group.decay {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            };
            let r = group.range.clone();
            let (p, g) = (&mut params[r.clone()], &grads[r.clone()]);
            let (m, v) = (&mut self.m[r.clone()], &mut self.v[r]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let denom = v[i].sqrt() * inv_bc2_sqrt + c.eps;
                p[i] = p[i] * decay - step * m[i] / denom;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f32,
    },
    /// `lr · gamma^k` where `k` counts the milestones (fractions of
    /// `total_steps`) already passed.
    MultiStep {
        lr: f32,
        milestones: Vec<f32>,
        gamma: f32,
        total_steps: u64,
    },
    /// Linear warm-up, then cosine decay down to `lr · min_ratio`.
    WarmupCosine {
        lr: f32,
        warmup_steps: u64,
        total_steps: u64,
        min_ratio: f32,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f32 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::MultiStep {
                lr,
                milestones,
                gamma,
                total_steps,
            } => {
                let passed = milestones
                    .iter()
                    .filter(|&&f| step >= (f as f64 * *total_steps as f64).round() as u64)
                    .count();
                lr * gamma.powi(passed as i32)
            }
            LrSchedule::WarmupCosine {
                lr,
                warmup_steps,
                total_steps,
                min_ratio,
            } => {
                if step < *warmup_steps {
                    return lr * (step + 1) as f32 / *warmup_steps as f32;
                }
                let span = total_steps.saturating_sub(*warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f32 / span as f32).min(1.0);
                let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
                lr * (min_ratio + (1.0 - min_ratio) * cosine)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the very first Adam step has magnitude ≈ lr.
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![1.0, -1.0];
        opt.step(
            &mut p,
            &[0.5, -3.0],
            &[ParamGroup {
                range: 0..2,
                decay: true,
            }],
            0.1,
        );
        assert!((p[0] - 0.9).abs() < 1e-5);
        assert!((p[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![2.0, 2.0];
        let groups = [
            ParamGroup {
                range: 0..1,
                decay: true,
            },
            ParamGroup {
                range: 1..2,
                decay: false,
            },
        ];
        opt.step(&mut p, &[0.0, 0.0], &groups, 0.1);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            1,
        );
        let mut p = vec![5.0f32];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.step(
                &mut p,
                &g,
                &[ParamGroup {
                    range: 0..1,
                    decay: false,
                }],
                0.05,
            );
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn multistep_decays_at_75_and_90_percent() {
        let s = LrSchedule::MultiStep {
            lr: 0.01,
            milestones: vec![0.75, 0.9],
            gamma: 0.1,
            total_steps: 1000,
        };
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(749), 0.01);
        assert!((s.lr_at(750) - 0.001).abs() < 1e-9);
        assert!((s.lr_at(899) - 0.001).abs() < 1e-9);
        assert!((s.lr_at(900) - 0.0001).abs() < 1e-9);
        assert!((s.lr_at(999) - 0.0001).abs() < 1e-9);
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = LrSchedule::WarmupCosine {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            min_ratio: 0.1,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-6);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-6);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-6);
        assert!((s.lr_at(60) - 0.55).abs() < 1e-5);
        assert!((s.lr_at(110) - 0.1).abs() < 1e-6);
        assert!((s.lr_at(500) - 0.1).abs() < 1e-6);
    }
}
