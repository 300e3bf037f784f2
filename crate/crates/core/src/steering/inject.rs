use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_with, Edit, GenerationSettings, HookSet, Intervention, ModelParams, TapSite};
use crate::seed::derive_seed;
use crate::steering::SteeringModel;
use crate::tokenizer::Token;

/// When a probe picks the centroid to inject.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Each position is classified from its own activation on every pass.
    #[default]
    PerToken,
    /// The choice made at the last prompt position is reused for the whole generation.
    PerPrompt,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" | "per_token" => Ok(Selection::PerToken),
            "prompt" | "per_prompt" => Ok(Selection::PerPrompt),
            _ => Err(Error::InvalidArgument(format!("unknown selection {s:?}"))),
        }
    }
}

/// Probe-selected centroid injection, usable inside any forward pass.
pub struct Steerer<'a> {
    model: &'a SteeringModel,
    active: Vec<bool>,
    selection: Selection,
    frozen: Vec<Option<usize>>,
    /// `α·c[k][ℓ]` precomputed in `f32`.
    scaled: Vec<Vec<f32>>,
}

impl<'a> Steerer<'a> {
    pub fn new(model: &'a SteeringModel, layers: &[usize], selection: Selection) -> Result<Self> {
        let mut active = vec![false; model.layers];
        for &l in layers {
            *active.get_mut(l).ok_or_else(|| {
                Error::InvalidArgument(format!("layer {l} out of range (L={})", model.layers))
            })? = true;
        }
        let alpha = model.alpha as f32;
        let scaled = (0..model.classes)
            .flat_map(|k| (0..model.layers).map(move |l| (k, l)))
            .map(|(k, l)| model.centroid(k, l).iter().map(|&c| alpha * c).collect())
            .collect();
        Ok(Self {
            model,
            active,
            selection,
            frozen: vec![None; model.layers],
            scaled,
        })
    }

    /// Clears frozen per-prompt choices.
    pub fn reset(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = None);
    }

    fn vector(&self, class: usize, layer: usize) -> &[f32] {
        &self.scaled[class * self.model.layers + layer]
    }
}

impl Intervention<f32> for Steerer<'_> {
    fn intervene(&mut self, site: TapSite, acts: &mut [f32], dim: usize) -> Result<()> {
        if site.kind != self.model.site || !self.active[site.layer] {
            return Ok(());
        }
        if dim != self.model.dim {
            return Err(Error::Shape(format!(
                "steering width {} at {site} (width {dim})",
                self.model.dim
            )));
        }
        let probe = &self.model.probes[site.layer];
        match self.selection {
            Selection::PerToken => {
                for row in acts.chunks_exact_mut(dim) {
                    let k = probe.predict(row);
                    for (a, v) in row.iter_mut().zip(self.vector(k, site.layer)) {
                        *a += v;
                    }
                }
            }
            Selection::PerPrompt => {
                let k = match self.frozen[site.layer] {
                    Some(k) => k,
                    None => {
                        let k = probe.predict(&acts[acts.len() - dim..]);
                        self.frozen[site.layer] = Some(k);
                        k
                    }
                };
                let v = self.vector(k, site.layer).to_vec();
                for row in acts.chunks_exact_mut(dim) {
                    for (a, x) in row.iter_mut().zip(&v) {
                        *a += x;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Static hooks from one activation per layer: the probe picks a centroid,
/// which is emitted as `add_vector(α·c)`. `layer_activations` is indexed by layer.
pub fn steer_hooks(
    model: &SteeringModel,
    layer_activations: &[Vec<f32>],
    layer_subset: &[usize],
) -> Result<HookSet> {
    let mut hooks = HookSet::new();
    for &l in layer_subset {
        if l >= model.layers {
            return Err(Error::InvalidArgument(format!("layer {l} out of range")));
        }
        let h = layer_activations
            .get(l)
            .ok_or_else(|| Error::Shape(format!("no activation supplied for layer {l}")))?;
        if h.len() != model.dim {
            return Err(Error::Shape(format!(
                "activation of width {} for steering width {}",
                h.len(),
                model.dim
            )));
        }
        let k = model.probes[l].predict(h);
        let alpha = model.alpha as f32;
        let v = model.centroid(k, l).iter().map(|&c| alpha * c).collect();
        hooks.push(TapSite::new(l, model.site), Edit::AddVector(v))?;
    }
    Ok(hooks)
}

/// Generation with probe-selected centroid injection at `layer_subset`.
pub fn steer_generate(
    params: &ModelParams,
    prompt: &[Token],
    model: &SteeringModel,
    settings: &GenerationSettings,
    layer_subset: &[usize],
    selection: Selection,
) -> Result<Vec<Token>> {
    if model.layers != params.config.num_layers || model.dim != model.site.dim(&params.config) {
        return Err(Error::Shape("steering model does not match the base model".into()));
    }
    let mut steerer = Steerer::new(model, layer_subset, selection)?;
    generate_with(params, prompt, settings, &mut steerer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub reps: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// A sample counts as a hit when its first generated token is this one.
    pub target: Token,
    pub layers: Vec<usize>,
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub hits: usize,
    pub samples: usize,
    pub rate: f64,
}

/// Target-token rate for each α; every α sees the same per-sample seeds.
pub fn alpha_sweep(
    params: &ModelParams,
    model: &SteeringModel,
    prompts: &[Vec<Token>],
    alphas: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<AlphaRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no alpha values to sweep".into()));
    }
    if prompts.is_empty() || settings.reps == 0 {
        return Err(Error::InvalidArgument("sweep needs prompts and reps >= 1".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let m = model.with_alpha(alpha);
            let cells: Vec<(usize, usize)> = (0..prompts.len())
                .flat_map(|p| (0..settings.reps).map(move |r| (p, r)))
                .collect();
            let hits = cells
                .par_iter()
                .map(|&(p, r)| {
                    let gs = GenerationSettings {
                        temperature: settings.temperature,
                        max_new_tokens: settings.max_new_tokens,
                        seed: derive_seed(settings.seed, p as u64, r as u64),
                    };
                    let out = steer_generate(params, &prompts[p], &m, &gs, &settings.layers, settings.selection)?;
                    Ok(usize::from(out.first() == Some(&settings.target)))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            let samples = cells.len();
            Ok(AlphaRow {
                alpha,
                hits,
                samples,
                rate: hits as f64 / samples as f64,
            })
        })
        .collect()
}
