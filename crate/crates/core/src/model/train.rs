//! Next-token cross-entropy training for the toy model: hand-written
//! backward pass through the block stack and an Adam update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, axpy_f32, Matrix};
use crate::model::forward::{run, Cache, LogitRows, NoIntervention};
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Token;

/// Tensors per block in declaration order:
/// attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down.
const PER_LAYER: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 800,
            learning_rate: 3e-3,
            batch_size: 16,
            warmup_steps: 50,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean token cross-entropy of each step's batch.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the final tenth of training (at least one step).
    pub fn final_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = (self.losses.len() / 10).max(1);
        let s = &self.losses[self.losses.len() - tail..];
        Some(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Gradient buffers aligned with [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Trains from `init_params(config)` on `corpus` with seeded minibatches.
pub fn train_toy(
    config: &ModelConfig,
    corpus: &[Vec<Token>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let mut params = ModelParams::init(config)?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "batch_size must be >= 1 and learning_rate > 0".into(),
        ));
    }
    let usable: Vec<&[Token]> = corpus
        .iter()
        .map(|s| &s[..s.len().min(config.max_seq_len)])
        .filter(|s| s.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no sequence with at least two tokens".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut grads = Gradients::zeros_like(&params);
    let mut adam = Adam::new(&grads);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        grads.clear();
        let batch: Vec<&[Token]> = (0..opts.batch_size)
            .map(|_| usable[rng.random_range(0..usable.len())])
            .collect();
        let positions: usize = batch.iter().map(|s| s.len() - 1).sum();
        let weight = 1.0 / positions as f64;
        let mut total = 0.0;
        for seq in batch {
            total += accumulate_sequence(&params, seq, weight, &mut grads)?;
        }
        let loss = total / positions as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        if opts.clip_norm > 0.0 {
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(Error::Divergence { step, loss: norm });
            }
            if norm > opts.clip_norm {
                let s = opts.clip_norm / norm;
                grads
                    .tensors
                    .iter_mut()
                    .for_each(|t| t.iter_mut().for_each(|g| *g *= s));
            }
        }
        let warm = if opts.warmup_steps > 0 {
            ((step + 1) as f64 / opts.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        // cosine decay to 10% of the peak rate
        let progress = step as f64 / opts.steps.max(1) as f64;
        let decay = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.step(&mut params, &grads, opts.learning_rate * warm * decay);
    }
    if !params.all_finite() {
        return Err(Error::Divergence {
            step: opts.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainReport { params, losses })
}

/// Mean next-token cross-entropy over `sequences` and its exact gradient.
pub fn loss_and_gradient(
    params: &ModelParams,
    sequences: &[Vec<Token>],
) -> Result<(f64, Gradients)> {
    let positions: usize = sequences.iter().map(|s| s.len().saturating_sub(1)).sum();
    if positions == 0 {
        return Err(Error::InvalidArgument("no predicted positions".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let weight = 1.0 / positions as f64;
    let mut total = 0.0;
    for s in sequences {
        if s.len() >= 2 {
            total += accumulate_sequence(params, s, weight, &mut grads)?;
        }
    }
    Ok((total / positions as f64, grads))
}

/// Mean next-token cross-entropy, evaluated in `f64` without gradients.
pub fn mean_loss(params: &ModelParams, sequences: &[Vec<Token>]) -> Result<f64> {
    let mut total = 0.0;
    let mut positions = 0usize;
    for s in sequences.iter().filter(|s| s.len() >= 2) {
        let (logits, _) = run::<f64>(params, s, &[], &mut NoIntervention, None, LogitRows::All)?;
        for t in 0..s.len() - 1 {
            total += cross_entropy(logits.row(t), s[t + 1] as usize).0;
        }
        positions += s.len() - 1;
    }
    if positions == 0 {
        return Err(Error::InvalidArgument("no predicted positions".into()));
    }
    Ok(total / positions as f64)
}

/// Returns the CE and the softmax probabilities.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    let ce = -(logits[target] - max - sum.ln());
    (ce, p)
}

/// Adds `weight * d(sum CE)/dθ` for one sequence into `grads`; returns the summed CE.
fn accumulate_sequence(
    params: &ModelParams,
    tokens: &[Token],
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let cfg = &params.config;
    let n = tokens.len();
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let v = cfg.vocab_size;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let nl = params.layers.len();

    let mut cache = Cache::<f64>::default();
    let (logits, _) = run::<f64>(
        params,
        tokens,
        &[],
        &mut NoIntervention,
        Some(&mut cache),
        LogitRows::All,
    )?;

    let lm_idx = 2 + PER_LAYER * nl;
    let mut dh = vec![0.0f64; n * d];
    let mut loss = 0.0;
    for t in 0..n - 1 {
        let (ce, mut p) = cross_entropy(logits.row(t), tokens[t + 1] as usize);
        loss += ce;
        p[tokens[t + 1] as usize] -= 1.0;
        let hrow = &cache.h_final[t * d..(t + 1) * d];
        let dhr = &mut dh[t * d..(t + 1) * d];
        for (o, g) in p.iter().enumerate() {
            let g = g * weight;
            axpy(g, hrow, &mut grads.tensors[lm_idx][o * d..(o + 1) * d]);
            grads.tensors[lm_idx + 1][o] += g;
            axpy_f32(g, params.lm_head.row(o), dhr);
        }
    }
    debug_assert_eq!(v, params.lm_bias.len());

    for li in (0..nl).rev() {
        let layer = &params.layers[li];
        let c = &cache.layers[li];
        let base = 2 + PER_LAYER * li;

        // post_mlp: h_out = h_mid + Wd · hidden
        let mut dhidden = vec![0.0; n * f];
        linear_backward(&layer.w_down, &c.hidden, &dh, &mut grads.tensors[base + 8], &mut dhidden);
        // hidden = σ(gate) ⊙ up
        let mut dgate = vec![0.0; n * f];
        let mut dup = vec![0.0; n * f];
        for i in 0..n * f {
            let s = crate::linalg::sigmoid(c.gate[i]);
            dup[i] = dhidden[i] * s;
            dgate[i] = dhidden[i] * c.up[i] * s * (1.0 - s);
        }
        let mut dx2 = vec![0.0; n * d];
        linear_backward(&layer.w_gate, &c.x2, &dgate, &mut grads.tensors[base + 6], &mut dx2);
        linear_backward(&layer.w_up, &c.x2, &dup, &mut grads.tensors[base + 7], &mut dx2);
        rms_norm_backward(&c.h_mid, &layer.mlp_norm, &c.inv2, &dx2, &mut grads.tensors[base + 5], &mut dh);

        // post_attention: h_mid = h_in + Wo · ctx
        let mut dctx = vec![0.0; n * d];
        linear_backward(&layer.wo, &c.ctx, &dh, &mut grads.tensors[base + 4], &mut dctx);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for head in 0..heads {
            let off = head * hd;
            for i in 0..n {
                let prow = &c.probs[(head * n + i) * n..(head * n + i) * n + i + 1];
                let dci = &dctx[i * d + off..i * d + off + hd];
                let mut inner = 0.0;
                for j in 0..=i {
                    let vj = &c.v[j * d + off..j * d + off + hd];
                    dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                    inner += prow[j] * dp[j];
                    axpy(prow[j], dci, &mut dv[j * d + off..j * d + off + hd]);
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &c.k[j * d + off..j * d + off + hd];
                    axpy(ds, kj, &mut dq[i * d + off..i * d + off + hd]);
                    let qi = &c.q[i * d + off..i * d + off + hd];
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + hd]);
                }
            }
        }
        let mut dx1 = vec![0.0; n * d];
        linear_backward(&layer.wq, &c.x1, &dq, &mut grads.tensors[base + 1], &mut dx1);
        linear_backward(&layer.wk, &c.x1, &dk, &mut grads.tensors[base + 2], &mut dx1);
        linear_backward(&layer.wv, &c.x1, &dv, &mut grads.tensors[base + 3], &mut dx1);
        rms_norm_backward(&c.h_in, &layer.attn_norm, &c.inv1, &dx1, &mut grads.tensors[base], &mut dh);
    }

    for (pos, &tok) in tokens.iter().enumerate() {
        let g = &dh[pos * d..(pos + 1) * d];
        let tok = tok as usize;
        for (a, b) in grads.tensors[0][tok * d..(tok + 1) * d].iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in grads.tensors[1][pos * d..(pos + 1) * d].iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(loss)
}

/// For `y[t] = W · x[t]`: `gw += Σ_t dy[t] ⊗ x[t]`, `dx[t] += Wᵀ dy[t]`.
fn linear_backward(w: &Matrix, x: &[f64], dy: &[f64], gw: &mut [f64], dx: &mut [f64]) {
    let (n_out, n_in) = (w.rows(), w.cols());
    for ((xr, dyr), dxr) in x
        .chunks_exact(n_in)
        .zip(dy.chunks_exact(n_out))
        .zip(dx.chunks_exact_mut(n_in))
    {
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, xr, &mut gw[o * n_in..(o + 1) * n_in]);
            axpy_f32(g, w.row(o), dxr);
        }
    }
}

/// Backward of `y = g ⊙ x · r(x)`; adds into `dgain` and `dx`.
fn rms_norm_backward(
    x: &[f64],
    gain: &[f32],
    inv: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dx: &mut [f64],
) {
    let d = gain.len();
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        let mut dot = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * r;
            dot += dyr[i] * gain[i] as f64 * xr[i];
        }
        let c = r * r * r * dot / d as f64;
        for i in 0..d {
            dxr[i] += r * dyr[i] * gain[i] as f64 - c * xr[i];
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(g: &Gradients) -> Self {
        Self {
            m: g.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: g.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] = (p[i] as f64 - upd) as f32;
            }
        }
    }
}
