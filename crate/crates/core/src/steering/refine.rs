use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{forward_with, Intervention, ModelParams, SiteKind, TapSite};
use crate::steering::{pair_tokens, probe_ce_gradient, ProbeState, PromptPair, SteeringModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            alpha: 1.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(
                "refine needs learning_rate > 0 and a finite alpha".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    pub model: SteeringModel,
    /// Mean probe cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Records the pre-injection activations at the answer-predicting positions,
/// then injects the true-label centroid at every position.
struct CaptureAndInject<'a> {
    model: &'a SteeringModel,
    label: usize,
    alpha: f32,
    kind: SiteKind,
    steps: std::ops::Range<usize>,
    captured: Vec<Vec<Vec<f64>>>,
}

impl Intervention<f32> for CaptureAndInject<'_> {
    fn intervene(&mut self, site: TapSite, acts: &mut [f32], dim: usize) -> Result<()> {
        if site.kind != self.kind {
            return Ok(());
        }
        self.captured[site.layer] = self
            .steps
            .clone()
            .map(|t| acts[t * dim..(t + 1) * dim].iter().map(|x| x.to_f64()).collect())
            .collect();
        let c = self.model.centroid(self.label, site.layer);
        for row in acts.chunks_exact_mut(dim) {
            for (a, &v) in row.iter_mut().zip(c) {
                *a += self.alpha * v;
            }
        }
        Ok(())
    }
}

/// Gradient refinement of the probes under steering. Each prompt is
/// teacher-forced on its positive answer while its true-label centroid is
/// injected at every layer; every layer's probe is then trained with
/// per-prompt gradient steps to predict that label from the activation at
/// each answer step. Only probe parameters change.
pub fn refine(
    params: &ModelParams,
    model: &SteeringModel,
    pairs: &[PromptPair],
    cfg: &RefineConfig,
) -> Result<RefineReport> {
    cfg.validate()?;
    model.validate()?;
    if pairs.len() != model.labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs but {} training labels",
            pairs.len(),
            model.labels.len()
        )));
    }
    if model.layers != params.config.num_layers || model.dim != model.site.dim(&params.config) {
        return Err(Error::Shape("steering model does not match the base model".into()));
    }

    let mut out = model.with_alpha(cfg.alpha);
    if cfg.epochs == 0 {
        return Ok(RefineReport {
            model: out,
            epoch_losses: Vec::new(),
        });
    }

    // One steered pass per prompt; every epoch reuses these activations.
    let mut cache = Vec::with_capacity(pairs.len());
    for (pair, &label) in pairs.iter().zip(&model.labels) {
        let (tokens, start) = pair_tokens(&pair.question, &pair.positive)?;
        let mut hook = CaptureAndInject {
            model,
            label,
            alpha: cfg.alpha as f32,
            kind: model.site,
            steps: start - 1..tokens.len() - 1,
            captured: vec![Vec::new(); model.layers],
        };
        forward_with(params, &tokens, &[], &mut hook)?;
        cache.push(hook.captured);
    }

    let mut states: Vec<ProbeState> = model.probes.iter().map(ProbeState::from_probe).collect();
    let (c, d) = (model.classes, model.dim);
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (acts, &label) in cache.iter().zip(&model.labels) {
            let mut prompt_loss = 0.0;
            for (state, steps) in states.iter_mut().zip(acts) {
                gw.iter_mut().for_each(|g| *g = 0.0);
                gb.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / steps.len() as f64;
                let mut loss = 0.0;
                for x in steps {
                    loss += probe_ce_gradient(state, x, label, scale, &mut gw, &mut gb);
                }
                prompt_loss += loss * scale;
                for (w, g) in state.weight.iter_mut().zip(&gw) {
                    *w -= cfg.learning_rate * g;
                }
                for (b, g) in state.bias.iter_mut().zip(&gb) {
                    *b -= cfg.learning_rate * g;
                }
            }
            epoch_loss += prompt_loss / model.layers as f64;
        }
        epoch_loss /= pairs.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    out.probes = states.iter().map(ProbeState::to_probe).collect();
    Ok(RefineReport {
        model: out,
        epoch_losses,
    })
}
