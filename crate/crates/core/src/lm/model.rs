//! Pre-LayerNorm decoder-only transformer with a hand-written backward pass.
//!
//! All parameters live in one flat `Vec<f32>`; [`Layout`] records where each
//! tensor sits. A batch is processed as the row-wise concatenation of its
//! sequences: dense layers run as one large matrix product, attention runs
//! per sequence with a causal mask.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LmConfig, LmError};
use crate::corpus::VOCAB_SIZE;
use crate::nn::{
    accumulate_col_sums, add_bias, cross_entropy_grad, gemm, softmax_in_place, ParamGroup,
};
use crate::seed;

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f32),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct TensorSpec {
    pub name: String,
    pub range: Range<usize>,
    pub decay: bool,
    init: Init,
}

/// Offsets of every tensor inside the flat parameter vector, in declared
/// (checkpoint) order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub(crate) wte: Range<usize>,
    pub(crate) wpe: Range<usize>,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    pub(crate) w_head: Range<usize>,
    pub(crate) b_head: Range<usize>,
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &LmConfig) -> Self {
        let d = c.model_dim;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, len: usize, decay: bool, init: Init| {
            let range = offset..offset + len;
            offset += len;
            tensors.push(TensorSpec {
                name,
                range: range.clone(),
                decay,
                init,
            });
            range
        };
        let resid_std = INIT_STD / (2.0 * c.layers as f32).sqrt();
        let wte = add("wte".into(), VOCAB_SIZE * d, true, Init::Normal(INIT_STD));
        let wpe = add(
            "wpe".into(),
            c.context_len * d,
            true,
            Init::Normal(INIT_STD),
        );
        let layers = (0..c.layers)
            .map(|l| LayerParams {
                ln1_g: add(format!("h{l}.ln1.g"), d, false, Init::Ones),
                ln1_b: add(format!("h{l}.ln1.b"), d, false, Init::Zeros),
                w_qkv: add(
                    format!("h{l}.attn.w_qkv"),
                    d * 3 * d,
                    true,
                    Init::Normal(INIT_STD),
                ),
                b_qkv: add(format!("h{l}.attn.b_qkv"), 3 * d, false, Init::Zeros),
                w_o: add(
                    format!("h{l}.attn.w_o"),
                    d * d,
                    true,
                    Init::Normal(resid_std),
                ),
                b_o: add(format!("h{l}.attn.b_o"), d, false, Init::Zeros),
                ln2_g: add(format!("h{l}.ln2.g"), d, false, Init::Ones),
                ln2_b: add(format!("h{l}.ln2.b"), d, false, Init::Zeros),
                w_fc: add(
                    format!("h{l}.mlp.w_fc"),
                    d * c.ff_dim,
                    true,
                    Init::Normal(INIT_STD),
                ),
                b_fc: add(format!("h{l}.mlp.b_fc"), c.ff_dim, false, Init::Zeros),
                w_proj: add(
                    format!("h{l}.mlp.w_proj"),
                    c.ff_dim * d,
                    true,
                    Init::Normal(resid_std),
                ),
                b_proj: add(format!("h{l}.mlp.b_proj"), d, false, Init::Zeros),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), d, false, Init::Ones);
        let lnf_b = add("lnf.b".into(), d, false, Init::Zeros);
        let w_head = add(
            "head.w".into(),
            d * VOCAB_SIZE,
            true,
            Init::Normal(INIT_STD),
        );
        let b_head = add("head.b".into(), VOCAB_SIZE, false, Init::Zeros);
        Self {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            tensors,
            total: offset,
        }
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.tensors
            .iter()
            .map(|t| ParamGroup {
                range: t.range.clone(),
                decay: t.decay,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LmModel {
    pub(crate) config: LmConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f32>,
    pub(crate) step: u64,
}

/// Scaled-normal weights, unit LayerNorm gains, zero biases.
pub fn init_lm(config: &LmConfig, seed_value: u64) -> Result<LmModel, LmError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![0.0f32; layout.total];
    let mut rng = seed::rng(seed_value, "lm/init", 0);
    for t in &layout.tensors {
        let slice = &mut params[t.range.clone()];
        match t.init {
            Init::Zeros => {}
            Init::Ones => slice.fill(1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std).expect("positive std");
                for v in slice {
                    *v = dist.sample(&mut rng);
                }
            }
        }
    }
    Ok(LmModel {
        config: config.clone(),
        layout,
        params,
        step: 0,
    })
}

impl LmModel {
    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn from_parts(config: LmConfig, params: Vec<f32>, step: u64) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            step,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

#[derive(Default)]
pub(crate) struct LayerCache {
    ln1_xhat: Vec<f32>,
    ln1_rstd: Vec<f32>,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    attn_cat: Vec<f32>,
    drop1: Option<Vec<f32>>,
    ln2_xhat: Vec<f32>,
    ln2_rstd: Vec<f32>,
    h2: Vec<f32>,
    fc_pre: Vec<f32>,
    fc_act: Vec<f32>,
    drop2: Option<Vec<f32>>,
    /// Block output (residual stream after this layer).
    pub(crate) x_out: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache {
    /// `(first row, length)` of each sequence.
    pub(crate) seqs: Vec<(usize, usize)>,
    prob_offsets: Vec<usize>,
    tokens: Vec<u8>,
    pub(crate) embed: Vec<f32>,
    pub(crate) layers: Vec<LayerCache>,
    lnf_xhat: Vec<f32>,
    lnf_rstd: Vec<f32>,
    hf: Vec<f32>,
    pub(crate) logits: Vec<f32>,
}

impl ForwardCache {
    pub(crate) fn rows(&self) -> usize {
        self.tokens.len()
    }
}

fn layer_norm(
    x: &[f32],
    g: &[f32],
    b: &[f32],
    out: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
) {
    let d = g.len();
    for (r, ((xr, or), hr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            hr[i] = h;
            or[i] = h * g[i] + b[i];
        }
    }
}

/// Accumulates the input gradient into `dx` and parameter gradients into
/// `dg`/`db`.
fn layer_norm_backward(
    dy: &[f32],
    g: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    dx: &mut [f32],
    dg: &mut [f32],
    db: &mut [f32],
) {
    let d = g.len();
    let mut dxhat = vec![0.0f32; d];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_h = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_h += dxhat[i] * hr[i];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_h /= d as f32;
        let rs = rstd[r];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - mean_dxhat - hr[i] * mean_dxhat_h);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn tanh(u: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask(len: usize, p: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
        .collect()
}

impl LmModel {
    fn p(&self, r: &Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    /// Forward pass over a batch of token sequences. `dropout_rng` enables
    /// dropout (training mode) when the configured rate is positive.
    pub(crate) fn forward(
        &self,
        batch: &[&[u8]],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache, LmError> {
        let c = &self.config;
        let (d, hd, nh, ff) = (c.model_dim, c.head_dim(), c.heads, c.ff_dim);
        let mut seqs = Vec::with_capacity(batch.len());
        let mut prob_offsets = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        let mut prob_total = 0;
        for s in batch {
            if s.len() > c.context_len {
                return Err(LmError::ContextOverflow {
                    len: s.len(),
                    context_len: c.context_len,
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
                return Err(LmError::Config(format!(
                    "token id {bad} outside the vocabulary"
                )));
            }
            seqs.push((tokens.len(), s.len()));
            prob_offsets.push(prob_total);
            prob_total += nh * s.len() * s.len();
            tokens.extend_from_slice(s);
        }
        let n = tokens.len();

        let wte = self.p(&self.layout.wte);
        let wpe = self.p(&self.layout.wpe);
        let mut embed = vec![0.0f32; n * d];
        for &(start, len) in &seqs {
            for t in 0..len {
                let row = &mut embed[(start + t) * d..(start + t + 1) * d];
                let tok = tokens[start + t] as usize;
                for i in 0..d {
                    row[i] = wte[tok * d + i] + wpe[t * d + i];
                }
            }
        }

        let use_dropout = c.dropout > 0.0 && dropout_rng.is_some();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut layers: Vec<LayerCache> = Vec::with_capacity(c.layers);
        for lp in &self.layout.layers {
            let x_in: &[f32] = layers.last().map(|l| l.x_out.as_slice()).unwrap_or(&embed);
            let mut lc = LayerCache {
                ln1_xhat: vec![0.0; n * d],
                ln1_rstd: vec![0.0; n],
                h1: vec![0.0; n * d],
                qkv: vec![0.0; n * 3 * d],
                probs: vec![0.0; prob_total],
                attn_cat: vec![0.0; n * d],
                ln2_xhat: vec![0.0; n * d],
                ln2_rstd: vec![0.0; n],
                h2: vec![0.0; n * d],
                fc_pre: vec![0.0; n * ff],
                fc_act: vec![0.0; n * ff],
                ..Default::default()
            };
            layer_norm(
                x_in,
                self.p(&lp.ln1_g),
                self.p(&lp.ln1_b),
                &mut lc.h1,
                &mut lc.ln1_xhat,
                &mut lc.ln1_rstd,
            );
            gemm(
                n,
                d,
                3 * d,
                1.0,
                &lc.h1,
                d,
                false,
                self.p(&lp.w_qkv),
                3 * d,
                false,
                0.0,
                &mut lc.qkv,
                3 * d,
            );
            add_bias(&mut lc.qkv, self.p(&lp.b_qkv));

            for (si, &(start, len)) in seqs.iter().enumerate() {
                for h in 0..nh {
                    let po = prob_offsets[si] + h * len * len;
                    let probs = &mut lc.probs[po..po + len * len];
                    let q = &lc.qkv[start * 3 * d + h * hd..];
                    let k = &lc.qkv[start * 3 * d + d + h * hd..];
                    gemm(
                        len,
                        hd,
                        len,
                        scale,
                        q,
                        3 * d,
                        false,
                        k,
                        3 * d,
                        true,
                        0.0,
                        probs,
                        len,
                    );
                    for i in 0..len {
                        let row = &mut probs[i * len..(i + 1) * len];
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(0.0);
                    }
                    let v = &lc.qkv[start * 3 * d + 2 * d + h * hd..];
                    let out = &mut lc.attn_cat[start * d + h * hd..];
                    gemm(
                        len,
                        len,
                        hd,
                        1.0,
                        probs,
                        len,
                        false,
                        v,
                        3 * d,
                        false,
                        0.0,
                        out,
                        d,
                    );
                }
            }

            let mut branch = vec![0.0f32; n * d];
            gemm(
                n,
                d,
                d,
                1.0,
                &lc.attn_cat,
                d,
                false,
                self.p(&lp.w_o),
                d,
                false,
                0.0,
                &mut branch,
                d,
            );
            add_bias(&mut branch, self.p(&lp.b_o));
            if use_dropout {
                let mask = dropout_mask(n * d, c.dropout, dropout_rng.as_deref_mut().unwrap());
                branch.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                lc.drop1 = Some(mask);
            }
            let mut x_mid = branch;
            x_mid.iter_mut().zip(x_in).for_each(|(v, x)| *v += x);

            layer_norm(
                &x_mid,
                self.p(&lp.ln2_g),
                self.p(&lp.ln2_b),
                &mut lc.h2,
                &mut lc.ln2_xhat,
                &mut lc.ln2_rstd,
            );
            gemm(
                n,
                d,
                ff,
                1.0,
                &lc.h2,
                d,
                false,
                self.p(&lp.w_fc),
                ff,
                false,
                0.0,
                &mut lc.fc_pre,
                ff,
            );
            add_bias(&mut lc.fc_pre, self.p(&lp.b_fc));
            lc.fc_act
                .iter_mut()
                .zip(&lc.fc_pre)
                .for_each(|(a, &x)| *a = gelu(x));
            let mut branch = vec![0.0f32; n * d];
            gemm(
                n,
                ff,
                d,
                1.0,
                &lc.fc_act,
                ff,
                false,
                self.p(&lp.w_proj),
                d,
                false,
                0.0,
                &mut branch,
                d,
            );
            add_bias(&mut branch, self.p(&lp.b_proj));
            if use_dropout {
                let mask = dropout_mask(n * d, c.dropout, dropout_rng.as_deref_mut().unwrap());
                branch.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                lc.drop2 = Some(mask);
            }
            branch.iter_mut().zip(&x_mid).for_each(|(v, x)| *v += x);
            lc.x_out = branch;
            layers.push(lc);
        }

        let x_last = layers.last().map(|l| l.x_out.as_slice()).unwrap_or(&embed);
        let mut lnf_xhat = vec![0.0; n * d];
        let mut lnf_rstd = vec![0.0; n];
        let mut hf = vec![0.0; n * d];
        layer_norm(
            x_last,
            self.p(&self.layout.lnf_g),
            self.p(&self.layout.lnf_b),
            &mut hf,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        let mut logits = vec![0.0; n * VOCAB_SIZE];
        gemm(
            n,
            d,
            VOCAB_SIZE,
            1.0,
            &hf,
            d,
            false,
            self.p(&self.layout.w_head),
            VOCAB_SIZE,
            false,
            0.0,
            &mut logits,
            VOCAB_SIZE,
        );
        add_bias(&mut logits, self.p(&self.layout.b_head));

        Ok(ForwardCache {
            seqs,
            prob_offsets,
            tokens,
            embed,
            layers,
            lnf_xhat,
            lnf_rstd,
            hf,
            logits,
        })
    }

    /// Mean next-token cross-entropy over every position that has a
    /// successor, without computing gradients.
    pub(crate) fn loss_only(&self, cache: &ForwardCache) -> (f64, usize) {
        let mut total = 0.0f64;
        let mut count = 0;
        let mut row = [0.0f32; VOCAB_SIZE];
        for &(start, len) in &cache.seqs {
            for t in 0..len.saturating_sub(1) {
                row.copy_from_slice(
                    &cache.logits[(start + t) * VOCAB_SIZE..(start + t + 1) * VOCAB_SIZE],
                );
                total +=
                    cross_entropy_grad(&mut row, cache.tokens[start + t + 1] as usize, 0.0) as f64;
                count += 1;
            }
        }
        (total, count)
    }

    /// Backward pass of the mean next-token loss. Writes (overwrites) the full
    /// gradient into `grads` and returns the mean loss.
    pub(crate) fn backward(&self, cache: &mut ForwardCache, grads: &mut [f32]) -> f32 {
        let c = &self.config;
        let (d, hd, nh, ff) = (c.model_dim, c.head_dim(), c.heads, c.ff_dim);
        let n = cache.rows();
        grads.fill(0.0);
        let targets: usize = cache
            .seqs
            .iter()
            .map(|&(_, len)| len.saturating_sub(1))
            .sum();
        let inv = 1.0 / targets.max(1) as f32;

        let mut dlogits = std::mem::take(&mut cache.logits);
        let mut loss = 0.0f64;
        for &(start, len) in &cache.seqs {
            for t in 0..len {
                let row = &mut dlogits[(start + t) * VOCAB_SIZE..(start + t + 1) * VOCAB_SIZE];
                if t + 1 < len {
                    loss +=
                        cross_entropy_grad(row, cache.tokens[start + t + 1] as usize, inv) as f64;
                } else {
                    row.fill(0.0);
                }
            }
        }

        let lay = &self.layout;
        {
            let (gw, gb) = (lay.w_head.clone(), lay.b_head.clone());
            gemm(
                d,
                n,
                VOCAB_SIZE,
                1.0,
                &cache.hf,
                d,
                true,
                &dlogits,
                VOCAB_SIZE,
                false,
                1.0,
                &mut grads[gw],
                VOCAB_SIZE,
            );
            accumulate_col_sums(&dlogits, &mut grads[gb]);
        }
        let mut dhf = vec![0.0f32; n * d];
        gemm(
            n,
            VOCAB_SIZE,
            d,
            1.0,
            &dlogits,
            VOCAB_SIZE,
            false,
            self.p(&lay.w_head),
            VOCAB_SIZE,
            true,
            0.0,
            &mut dhf,
            d,
        );
        let mut dx = vec![0.0f32; n * d];
        {
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_backward(
                &dhf,
                self.p(&lay.lnf_g),
                &cache.lnf_xhat,
                &cache.lnf_rstd,
                &mut dx,
                &mut dg,
                &mut db,
            );
            add_into(&mut grads[lay.lnf_g.clone()], &dg);
            add_into(&mut grads[lay.lnf_b.clone()], &db);
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let mut dbranch = vec![0.0f32; n * d];
        let mut dfc = vec![0.0f32; n * ff];
        let mut dh = vec![0.0f32; n * d];
        let mut dcat = vec![0.0f32; n * d];
        let mut dqkv = vec![0.0f32; n * 3 * d];
        for (l, lp) in lay.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            // MLP branch.
            dbranch.copy_from_slice(&dx);
            if let Some(mask) = &lc.drop2 {
                dbranch.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            accumulate_col_sums(&dbranch, &mut grads[lp.b_proj.clone()]);
            gemm(
                ff,
                n,
                d,
                1.0,
                &lc.fc_act,
                ff,
                true,
                &dbranch,
                d,
                false,
                1.0,
                &mut grads[lp.w_proj.clone()],
                d,
            );
            gemm(
                n,
                d,
                ff,
                1.0,
                &dbranch,
                d,
                false,
                self.p(&lp.w_proj),
                d,
                true,
                0.0,
                &mut dfc,
                ff,
            );
            dfc.iter_mut()
                .zip(&lc.fc_pre)
                .for_each(|(g, &x)| *g *= gelu_grad(x));
            accumulate_col_sums(&dfc, &mut grads[lp.b_fc.clone()]);
            gemm(
                d,
                n,
                ff,
                1.0,
                &lc.h2,
                d,
                true,
                &dfc,
                ff,
                false,
                1.0,
                &mut grads[lp.w_fc.clone()],
                ff,
            );
            gemm(
                n,
                ff,
                d,
                1.0,
                &dfc,
                ff,
                false,
                self.p(&lp.w_fc),
                ff,
                true,
                0.0,
                &mut dh,
                d,
            );
            {
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                layer_norm_backward(
                    &dh,
                    self.p(&lp.ln2_g),
                    &lc.ln2_xhat,
                    &lc.ln2_rstd,
                    &mut dx,
                    &mut dg,
                    &mut db,
                );
                add_into(&mut grads[lp.ln2_g.clone()], &dg);
                add_into(&mut grads[lp.ln2_b.clone()], &db);
            }

            // Attention branch; `dx` now holds the gradient at x_mid.
            dbranch.copy_from_slice(&dx);
            if let Some(mask) = &lc.drop1 {
                dbranch.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            accumulate_col_sums(&dbranch, &mut grads[lp.b_o.clone()]);
            gemm(
                d,
                n,
                d,
                1.0,
                &lc.attn_cat,
                d,
                true,
                &dbranch,
                d,
                false,
                1.0,
                &mut grads[lp.w_o.clone()],
                d,
            );
            gemm(
                n,
                d,
                d,
                1.0,
                &dbranch,
                d,
                false,
                self.p(&lp.w_o),
                d,
                true,
                0.0,
                &mut dcat,
                d,
            );

            for (si, &(start, len)) in cache.seqs.iter().enumerate() {
                let mut dp = vec![0.0f32; len * len];
                for h in 0..nh {
                    let po = cache.prob_offsets[si] + h * len * len;
                    let probs = &lc.probs[po..po + len * len];
                    let base = start * 3 * d + h * hd;
                    let dout = &dcat[start * d + h * hd..];
                    // dP = dO · Vᵀ ; dV = Pᵀ · dO
                    gemm(
                        len,
                        hd,
                        len,
                        1.0,
                        dout,
                        d,
                        false,
                        &lc.qkv[base + 2 * d..],
                        3 * d,
                        true,
                        0.0,
                        &mut dp,
                        len,
                    );
                    gemm(
                        len,
                        len,
                        hd,
                        1.0,
                        probs,
                        len,
                        true,
                        dout,
                        d,
                        false,
                        0.0,
                        &mut dqkv[base + 2 * d..],
                        3 * d,
                    );
                    // Softmax backward, folded with the 1/sqrt(hd) scale.
                    for i in 0..len {
                        let pr = &probs[i * len..(i + 1) * len];
                        let dr = &mut dp[i * len..(i + 1) * len];
                        let dot: f32 = pr[..=i].iter().zip(&dr[..=i]).map(|(p, g)| p * g).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                        dr[i + 1..].fill(0.0);
                    }
                    // dQ = dS · K ; dK = dSᵀ · Q
                    gemm(
                        len,
                        len,
                        hd,
                        1.0,
                        &dp,
                        len,
                        false,
                        &lc.qkv[base + d..],
                        3 * d,
                        false,
                        0.0,
                        &mut dqkv[base..],
                        3 * d,
                    );
                    gemm(
                        len,
                        len,
                        hd,
                        1.0,
                        &dp,
                        len,
                        true,
                        &lc.qkv[base..],
                        3 * d,
                        false,
                        0.0,
                        &mut dqkv[base + d..],
                        3 * d,
                    );
                }
            }
            accumulate_col_sums(&dqkv, &mut grads[lp.b_qkv.clone()]);
            gemm(
                d,
                n,
                3 * d,
                1.0,
                &lc.h1,
                d,
                true,
                &dqkv,
                3 * d,
                false,
                1.0,
                &mut grads[lp.w_qkv.clone()],
                3 * d,
            );
            gemm(
                n,
                3 * d,
                d,
                1.0,
                &dqkv,
                3 * d,
                false,
                self.p(&lp.w_qkv),
                3 * d,
                true,
                0.0,
                &mut dh,
                d,
            );
            {
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                layer_norm_backward(
                    &dh,
                    self.p(&lp.ln1_g),
                    &lc.ln1_xhat,
                    &lc.ln1_rstd,
                    &mut dx,
                    &mut dg,
                    &mut db,
                );
                add_into(&mut grads[lp.ln1_g.clone()], &dg);
                add_into(&mut grads[lp.ln1_b.clone()], &db);
            }
        }

        let (wte, wpe) = (lay.wte.clone(), lay.wpe.clone());
        for &(start, len) in &cache.seqs {
            for t in 0..len {
                let g = &dx[(start + t) * d..(start + t + 1) * d];
                let tok = cache.tokens[start + t] as usize;
                add_into(
                    &mut grads[wte.start + tok * d..wte.start + (tok + 1) * d],
                    g,
                );
                add_into(&mut grads[wpe.start + t * d..wpe.start + (t + 1) * d], g);
            }
        }
        cache.logits = dlogits;
        (loss * inv as f64) as f32
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> LmConfig {
        LmConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            ..LmConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny_config();
        let a = init_lm(&c, 5).unwrap();
        let b = init_lm(&c, 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, init_lm(&c, 6).unwrap().params);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = LmConfig {
            model_dim: 130,
            heads: 4,
            ..LmConfig::default()
        };
        assert!(matches!(init_lm(&c, 0), Err(LmError::Config(_))));
        let c = LmConfig {
            context_len: 100,
            ..LmConfig::default()
        };
        assert!(matches!(init_lm(&c, 0), Err(LmError::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = LmConfig {
            dropout: 0.0,
            ..tiny_config()
        };
        let mut model = init_lm(&c, 1).unwrap();
        // Larger weights so the check is not dominated by near-zero gradients.
        for v in model.params.iter_mut() {
            *v *= 3.0;
        }
        let seqs: Vec<Vec<u8>> = vec![vec![16, 0, 3, 1, 11, 12, 18], vec![16, 2, 7, 13, 18]];
        let batch: Vec<&[u8]> = seqs.iter().map(|s| s.as_slice()).collect();
        let mut grads = vec![0.0; model.num_params()];
        let mut cache = model.forward(&batch, None).unwrap();
        model.backward(&mut cache, &mut grads);

        let loss_at = |m: &LmModel| {
            let cache = m.forward(&batch, None).unwrap();
            let (t, n) = m.loss_only(&cache);
            t / n as f64
        };
        let mut checked = 0;
        let mut worst = 0.0f64;
        for t in &model.layout.tensors.clone() {
            let len = t.range.len();
            for k in [0, len / 3, len - 1] {
                let idx = t.range.start + k;
                let orig = model.params[idx];
                let eps = 1e-2f32;
                model.params[idx] = orig + eps;
                let up = loss_at(&model);
                model.params[idx] = orig - eps;
                let down = loss_at(&model);
                model.params[idx] = orig;
                let numeric = (up - down) / (2.0 * eps as f64);
                let analytic = grads[idx] as f64;
                let err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-2);
                worst = worst.max(err);
                assert!(
                    err < 5e-2,
                    "{} [{k}]: numeric {numeric} analytic {analytic}",
                    t.name
                );
                checked += 1;
            }
        }
        assert!(checked > 40, "{checked}");
        assert!(worst < 5e-2);
    }
}
