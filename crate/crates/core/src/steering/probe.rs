use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, softmax};
use crate::steering::DiffSet;

/// Multinomial logistic-regression probe: `z = W x + b`, `W` is `C × D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Probe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weight: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.classes)
            .map(|k| dot(&self.weight[k * self.dim..(k + 1) * self.dim], x) + self.bias[k] as f64)
            .collect()
    }

    /// Most likely class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }
}

/// `f64` working copy of a probe used during optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeState {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeState {
    pub fn from_probe(p: &Probe) -> Self {
        Self {
            classes: p.classes,
            dim: p.dim,
            weight: p.weight.iter().map(|&w| w as f64).collect(),
            bias: p.bias.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn to_probe(&self) -> Probe {
        Probe {
            classes: self.classes,
            dim: self.dim,
            weight: self.weight.iter().map(|&w| w as f32).collect(),
            bias: self.bias.iter().map(|&b| b as f32).collect(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                self.weight[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[k]
            })
            .collect()
    }
}

/// Cross-entropy of one example and its gradient `(softmax(z) − onehot) xᵀ`.
/// Gradients are accumulated into `grad_w` / `grad_b` scaled by `scale`.
pub fn probe_ce_gradient(
    probe: &ProbeState,
    x: &[f64],
    label: usize,
    scale: f64,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> f64 {
    let z = probe.logits(x);
    let p = softmax(&z, 1.0);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for k in 0..probe.classes {
        let g = (p[k] - if k == label { 1.0 } else { 0.0 }) * scale;
        grad_b[k] += g;
        for (gw, v) in grad_w[k * probe.dim..(k + 1) * probe.dim].iter_mut().zip(x) {
            *gw += g * v;
        }
    }
    lse - z[label]
}

/// Mean cross-entropy of a probe over `(x, label)` examples.
pub fn probe_ce_loss(probe: &ProbeState, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = probe.logits(x);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[y]
        })
        .sum();
    total / xs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainOptions {
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Stop when one step improves the mean CE by less than this.
    pub tol: f64,
}

impl Default for ProbeTrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iter: 10_000,
            tol: 1e-6,
        }
    }
}

/// Full-batch gradient descent on mean CE from a zero start.
pub fn fit_probe(
    xs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    opts: &ProbeTrainOptions,
) -> Result<Probe> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} examples with {} labels",
            xs.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let dim = xs[0].len();
    let mut state = ProbeState::from_probe(&Probe::zeros(classes, dim));
    let n = xs.len() as f64;
    let mut gw = vec![0.0; classes * dim];
    let mut gb = vec![0.0; classes];
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iter {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            loss += probe_ce_gradient(&state, x, y, 1.0 / n, &mut gw, &mut gb);
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: 0, loss });
        }
        if prev - loss < opts.tol {
            break;
        }
        prev = loss;
        for (w, g) in state.weight.iter_mut().zip(&gw) {
            *w -= opts.learning_rate * g;
        }
        for (b, g) in state.bias.iter_mut().zip(&gb) {
            *b -= opts.learning_rate * g;
        }
    }
    Ok(state.to_probe())
}

/// One probe per layer, each fit on that layer's Δ with the shared prompt labels.
pub fn train_probes(
    diffs: &DiffSet,
    labels: &[usize],
    classes: usize,
    opts: &ProbeTrainOptions,
) -> Result<Vec<Probe>> {
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("empty DiffSet".into()));
    }
    if labels.len() != diffs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} prompts",
            labels.len(),
            diffs.len()
        )));
    }
    (0..diffs.num_layers())
        .map(|l| {
            let xs: Vec<Vec<f64>> = (0..diffs.len())
                .map(|i| diffs.layer(i, l).iter().map(|&x| x as f64).collect())
                .collect();
            fit_probe(&xs, labels, classes, opts)
        })
        .collect()
}
