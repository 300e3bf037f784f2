//! Forward pass with tap sites and activation edits.
//!
//! Each block is pre-normalized (gain-only RMS norm):
//!
//! ```text
//! a   = Wo · attn(norm(h))            -> attn_output
//! h   = h + a                         -> post_attention
//! m   = σ(Wg · norm(h)) ⊙ (Wu · norm(h)) -> mlp_hidden
//! h   = h + Wd · m                    -> post_mlp
//! ```
//!
//! Logits are read straight off the last residual, `W_LM · h + b_LM`, so an
//! edit to the final `post_mlp` site shifts the logits linearly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, dot_act, linear_rows, sigmoid, Matrix, Real};
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Token;

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Where in a block an activation is tapped or edited.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    PostAttention,
    PostMlp,
    MlpHidden,
    AttnOutput,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [
        SiteKind::PostAttention,
        SiteKind::PostMlp,
        SiteKind::MlpHidden,
        SiteKind::AttnOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::PostAttention => "post_attention",
            SiteKind::PostMlp => "post_mlp",
            SiteKind::MlpHidden => "mlp_hidden",
            SiteKind::AttnOutput => "attn_output",
        }
    }

    /// Width of the activation at this site: `ffn_dim` for `mlp_hidden`, else `hidden_dim`.
    pub fn dim(self, config: &ModelConfig) -> usize {
        match self {
            SiteKind::MlpHidden => config.ffn_dim,
            _ => config.hidden_dim,
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown site kind {s:?}")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapSite {
    pub layer: usize,
    pub kind: SiteKind,
}

impl TapSite {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }

    pub fn dim(&self, config: &ModelConfig) -> usize {
        self.kind.dim(config)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.num_layers {
            return Err(Error::Shape(format!(
                "site layer {} out of range for {} layers",
                self.layer, config.num_layers
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TapSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

/// A single activation edit, applied identically at every token position.
#[derive(Clone, Debug, PartialEq)]
pub enum Edit {
    AddVector(Vec<f32>),
    SetNeuron { index: usize, value: f32 },
    AddNeuron { index: usize, delta: f32 },
}

/// Static activation edits keyed by site, applied in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HookSet {
    edits: Vec<(TapSite, Edit)>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edit. Rejects a second `SetNeuron` on the same site and index.
    pub fn push(&mut self, site: TapSite, edit: Edit) -> Result<()> {
        if let Edit::SetNeuron { index, .. } = edit {
            let dup = self.edits.iter().any(|(s, e)| {
                *s == site && matches!(e, Edit::SetNeuron { index: i, .. } if *i == index)
            });
            if dup {
                return Err(Error::InvalidArgument(format!(
                    "duplicate set_neuron at {site} index {index}"
                )));
            }
        }
        self.edits.push((site, edit));
        Ok(())
    }

    pub fn with(mut self, site: TapSite, edit: Edit) -> Result<Self> {
        self.push(site, edit)?;
        Ok(self)
    }

    pub fn edits(&self) -> &[(TapSite, Edit)] {
        &self.edits
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    /// Checks every edit against the site's layer range and width.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (site, edit) in &self.edits {
            site.validate(config)?;
            let dim = site.dim(config);
            match edit {
                Edit::AddVector(v) if v.len() != dim => {
                    return Err(Error::Shape(format!(
                        "add_vector of length {} at {site} (width {dim})",
                        v.len()
                    )))
                }
                Edit::SetNeuron { index, .. } | Edit::AddNeuron { index, .. } if *index >= dim => {
                    return Err(Error::Shape(format!(
                        "neuron index {index} at {site} (width {dim})"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Hook point called at every site, after the activation is computed and
/// before it is captured and propagated. `acts` is row-major, `dim` wide.
pub trait Intervention<S: Real> {
    fn intervene(&mut self, site: TapSite, acts: &mut [S], dim: usize) -> Result<()>;
}

impl<S: Real> Intervention<S> for HookSet {
    fn intervene(&mut self, site: TapSite, acts: &mut [S], dim: usize) -> Result<()> {
        for (s, edit) in &self.edits {
            if *s != site {
                continue;
            }
            for row in acts.chunks_exact_mut(dim) {
                match edit {
                    Edit::AddVector(v) => {
                        if v.len() != dim {
                            return Err(Error::Shape(format!(
                                "add_vector of length {} at {site} (width {dim})",
                                v.len()
                            )));
                        }
                        for (a, b) in row.iter_mut().zip(v) {
                            *a += S::from_f32(*b);
                        }
                    }
                    Edit::SetNeuron { index, value } => {
                        *row.get_mut(*index).ok_or_else(|| {
                            Error::Shape(format!("neuron index {index} at {site}"))
                        })? = S::from_f32(*value);
                    }
                    Edit::AddNeuron { index, delta } => {
                        *row.get_mut(*index).ok_or_else(|| {
                            Error::Shape(format!("neuron index {index} at {site}"))
                        })? += S::from_f32(*delta);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Intervention that does nothing.
pub struct NoIntervention;

impl<S: Real> Intervention<S> for NoIntervention {
    fn intervene(&mut self, _: TapSite, _: &mut [S], _: usize) -> Result<()> {
        Ok(())
    }
}

/// Activations captured at requested sites; one row per token position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    captured: BTreeMap<TapSite, Matrix>,
}

impl ForwardTrace {
    pub fn get(&self, site: &TapSite) -> Option<&Matrix> {
        self.captured.get(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &TapSite> {
        self.captured.keys()
    }

    pub fn into_map(self) -> BTreeMap<TapSite, Matrix> {
        self.captured
    }
}

/// Per-position vocabulary logits, `len × V`, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    vocab: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.rows() - 1)
    }
}

/// Full forward pass applying `hooks`, capturing `taps`.
pub fn forward(
    params: &ModelParams,
    tokens: &[Token],
    taps: &[TapSite],
    hooks: &HookSet,
) -> Result<(Logits, ForwardTrace)> {
    hooks.validate(&params.config)?;
    let mut hooks = hooks.clone();
    forward_with(params, tokens, taps, &mut hooks)
}

/// Forward pass with an arbitrary (possibly stateful) intervention.
pub fn forward_with(
    params: &ModelParams,
    tokens: &[Token],
    taps: &[TapSite],
    intervention: &mut dyn Intervention<f32>,
) -> Result<(Logits, ForwardTrace)> {
    run::<f32>(params, tokens, taps, intervention, None, LogitRows::All)
}

/// Captures activations only; the LM head is skipped.
pub fn capture(
    params: &ModelParams,
    tokens: &[Token],
    taps: &[TapSite],
    intervention: &mut dyn Intervention<f32>,
) -> Result<ForwardTrace> {
    Ok(run::<f32>(params, tokens, taps, intervention, None, LogitRows::None)?.1)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) enum LogitRows {
    All,
    Last,
    None,
}

/// Intermediates kept for the backward pass.
#[derive(Default)]
pub(crate) struct LayerCache<S> {
    pub h_in: Vec<S>,
    pub x1: Vec<S>,
    pub inv1: Vec<f64>,
    pub q: Vec<S>,
    pub k: Vec<S>,
    pub v: Vec<S>,
    /// heads × T × T, causal entries only.
    pub probs: Vec<f64>,
    pub ctx: Vec<S>,
    pub h_mid: Vec<S>,
    pub x2: Vec<S>,
    pub inv2: Vec<f64>,
    pub gate: Vec<S>,
    pub up: Vec<S>,
    pub hidden: Vec<S>,
}

#[derive(Default)]
pub(crate) struct Cache<S> {
    pub layers: Vec<LayerCache<S>>,
    pub h_final: Vec<S>,
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::ContextOverflow {
            needed: tokens.len(),
            limit: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Row-wise `y = g ⊙ x / rms(x)`; returns the per-row inverse RMS.
pub(crate) fn rms_norm_rows<S: Real>(x: &[S], gain: &[f32], out: &mut [S]) -> Vec<f64> {
    let d = gain.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = dot_act(xr, xr) / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((y, xv), g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = S::from_f64(xv.to_f64() * r * *g as f64);
        }
        inv.push(r);
    }
    inv
}

pub(crate) fn run<S: Real>(
    params: &ModelParams,
    tokens: &[Token],
    taps: &[TapSite],
    intervention: &mut dyn Intervention<S>,
    mut cache: Option<&mut Cache<S>>,
    logit_rows: LogitRows,
) -> Result<(Logits, ForwardTrace)> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    for tap in taps {
        tap.validate(cfg)?;
    }
    let n = tokens.len();
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h: Vec<S> = Vec::with_capacity(n * d);
    for (pos, &tok) in tokens.iter().enumerate() {
        let e = params.token_embedding.row(tok as usize);
        let p = params.position_embedding.row(pos);
        h.extend(e.iter().zip(p).map(|(a, b)| S::from_f32(*a) + S::from_f32(*b)));
    }

    let mut trace = ForwardTrace::default();
    let visit = |site: TapSite,
                     acts: &mut [S],
                     dim: usize,
                     trace: &mut ForwardTrace,
                     iv: &mut dyn Intervention<S>|
     -> Result<()> {
        iv.intervene(site, acts, dim)?;
        if taps.contains(&site) {
            let m = Matrix::from_vec(n, dim, acts.iter().map(|a| a.to_f32()).collect());
            trace.captured.insert(site, m);
        }
        Ok(())
    };

    for (li, layer) in params.layers.iter().enumerate() {
        let h_in = if cache.is_some() { h.clone() } else { Vec::new() };

        let mut x1 = vec![S::default(); n * d];
        let inv1 = rms_norm_rows(&h, &layer.attn_norm, &mut x1);
        let mut q = vec![S::default(); n * d];
        let mut k = vec![S::default(); n * d];
        let mut v = vec![S::default(); n * d];
        linear_rows(&layer.wq, &x1, &mut q);
        linear_rows(&layer.wk, &x1, &mut k);
        linear_rows(&layer.wv, &x1, &mut v);

        let keep_probs = cache.is_some();
        let mut probs = if keep_probs {
            vec![0.0; heads * n * n]
        } else {
            Vec::new()
        };
        let mut ctx = vec![S::default(); n * d];
        let mut scores = vec![0.0f64; n];
        let mut acc = vec![0.0f64; hd];
        for head in 0..heads {
            let off = head * hd;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    *s = dot_act(qi, &k[j * d + off..j * d + off + hd]) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    *s /= sum;
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (a, x) in acc.iter_mut().zip(vj) {
                        *a += *s * x.to_f64();
                    }
                }
                if keep_probs {
                    probs[(head * n + i) * n..(head * n + i) * n + i + 1]
                        .copy_from_slice(&scores[..i + 1]);
                }
                for (c, a) in ctx[i * d + off..i * d + off + hd].iter_mut().zip(&acc) {
                    *c = S::from_f64(*a);
                }
            }
        }

        let mut attn = vec![S::default(); n * d];
        linear_rows(&layer.wo, &ctx, &mut attn);
        visit(TapSite::new(li, SiteKind::AttnOutput), &mut attn, d, &mut trace, intervention)?;
        for (hv, a) in h.iter_mut().zip(&attn) {
            *hv += *a;
        }
        visit(TapSite::new(li, SiteKind::PostAttention), &mut h, d, &mut trace, intervention)?;
        let h_mid = if cache.is_some() { h.clone() } else { Vec::new() };

        let mut x2 = vec![S::default(); n * d];
        let inv2 = rms_norm_rows(&h, &layer.mlp_norm, &mut x2);
        let mut gate = vec![S::default(); n * f];
        let mut up = vec![S::default(); n * f];
        linear_rows(&layer.w_gate, &x2, &mut gate);
        linear_rows(&layer.w_up, &x2, &mut up);
        let mut hidden: Vec<S> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| S::from_f64(sigmoid(g.to_f64()) * u.to_f64()))
            .collect();
        visit(TapSite::new(li, SiteKind::MlpHidden), &mut hidden, f, &mut trace, intervention)?;
        let mut mlp = vec![S::default(); n * d];
        linear_rows(&layer.w_down, &hidden, &mut mlp);
        for (hv, m) in h.iter_mut().zip(&mlp) {
            *hv += *m;
        }
        visit(TapSite::new(li, SiteKind::PostMlp), &mut h, d, &mut trace, intervention)?;

        if let Some(c) = cache.as_deref_mut() {
            c.layers.push(LayerCache {
                h_in,
                x1,
                inv1,
                q,
                k,
                v,
                probs,
                ctx,
                h_mid,
                x2,
                inv2,
                gate,
                up,
                hidden,
            });
        }
    }

    let vocab = cfg.vocab_size;
    let rows: Vec<usize> = match logit_rows {
        LogitRows::All => (0..n).collect(),
        LogitRows::Last => vec![n - 1],
        LogitRows::None => Vec::new(),
    };
    let mut data = Vec::with_capacity(rows.len() * vocab);
    for t in rows {
        let hr = &h[t * d..(t + 1) * d];
        for (w, b) in params.lm_head.iter_rows().zip(&params.lm_bias) {
            data.push(dot(w, hr) + *b as f64);
        }
    }
    if let Some(c) = cache {
        c.h_final = h;
    }
    Ok((Logits { vocab, data }, trace))
}
