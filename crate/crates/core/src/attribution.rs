//! Static neuron attribution through the LM head.
//!
//! A neuron's effective weight row `W_up[n] ⊙ σ(W_gate[n])` is decoded as if
//! it were a residual state, and the decoded probability of a token of
//! interest is normalized by the mean of the row's top-k decoded
//! probabilities. Scanning every neuron ranks candidate feature neurons;
//! [`amplify_hook`] perturbs one of them during generation.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softmax, Matrix};
use crate::model::{Edit, HookSet, ModelConfig, ModelParams, SiteKind, TapSite};
use crate::tokenizer::{Fence, Token, BOS, BYTE_TOKENS, EOS};

pub const DEFAULT_TOP_K: usize = 100;
/// Decoded tokens kept per map entry, for reporting.
pub const TOP_TOKENS: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronRef {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.num_layers || self.neuron >= config.ffn_dim {
            return Err(Error::InvalidArgument(format!(
                "neuron L{} N{} out of range (L={}, F={})",
                self.layer, self.neuron, config.num_layers, config.ffn_dim
            )));
        }
        Ok(())
    }
}

/// `W_up ⊙ σ(W_gate)` for one layer, `F × D`.
pub fn effective_weights(params: &ModelParams, layer: usize) -> Result<Matrix> {
    let lp = params.layers.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} out of range (L={})", params.layers.len()))
    })?;
    let up = lp.w_up.as_slice();
    let data = lp
        .w_gate
        .as_slice()
        .iter()
        .zip(up)
        .map(|(&g, &u)| (u as f64 * sigmoid(g as f64)) as f32)
        .collect();
    Ok(Matrix::from_vec(lp.w_up.rows(), lp.w_up.cols(), data))
}

/// `softmax(W_LM w + b_LM)`.
pub fn decode_row(params: &ModelParams, w: &[f32]) -> Result<Vec<f64>> {
    if w.len() != params.config.hidden_dim {
        return Err(Error::Shape(format!(
            "row of length {} for hidden size {}",
            w.len(),
            params.config.hidden_dim
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite row".into()));
    }
    let mut logits = params.lm_head.matvec_f64(w);
    for (z, &b) in logits.iter_mut().zip(&params.lm_bias) {
        *z += b as f64;
    }
    Ok(softmax(&logits, 1.0))
}

/// `P[t]` divided by the mean of the `k` largest entries of `P` (which may
/// include `P[t]`). `k` is clamped to the vocabulary size.
pub fn normalized_score(p: &[f64], token: Token, k: usize) -> Result<f64> {
    let t = token as usize;
    if t >= p.len() {
        return Err(Error::TokenOutOfVocab {
            token,
            vocab: p.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let k = k.min(p.len());
    let mut sorted = p.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mean = sorted[..k].iter().sum::<f64>() / k as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "degenerate distribution: top-k mass is zero".into(),
        ));
    }
    Ok(p[t] / mean)
}

fn top_tokens(p: &[f64], n: usize) -> Vec<Token> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.into_iter().map(|i| i as Token).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub neuron: NeuronRef,
    pub score: f64,
    pub top_tokens: Vec<Token>,
}

/// Every neuron's score for one token, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub token: Token,
    pub k: usize,
    pub entries: Vec<ActivationEntry>,
}

/// Canonical order: score descending, then (layer, neuron) ascending.
pub fn canonical_order(a: &ActivationEntry, b: &ActivationEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.neuron.cmp(&b.neuron))
}

/// Scores every neuron of every layer, one effective-weight row at a time.
pub fn scan_token(params: &ModelParams, token: Token, k: usize) -> Result<ActivationMap> {
    let v = params.config.vocab_size;
    if token as usize >= v {
        return Err(Error::TokenOutOfVocab { token, vocab: v });
    }
    let k = k.clamp(1, v);
    let per_layer = (0..params.config.num_layers)
        .into_par_iter()
        .map(|layer| {
            let lp = &params.layers[layer];
            let mut row = vec![0.0f32; params.config.hidden_dim];
            (0..params.config.ffn_dim)
                .map(|n| {
                    for ((r, &g), &u) in row
                        .iter_mut()
                        .zip(lp.w_gate.row(n))
                        .zip(lp.w_up.row(n))
                    {
                        *r = (u as f64 * sigmoid(g as f64)) as f32;
                    }
                    let p = decode_row(params, &row)?;
                    Ok(ActivationEntry {
                        neuron: NeuronRef { layer, neuron: n },
                        score: normalized_score(&p, token, k)?,
                        top_tokens: top_tokens(&p, TOP_TOKENS),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries: Vec<ActivationEntry> = per_layer.into_iter().flatten().collect();
    entries.sort_by(canonical_order);
    Ok(ActivationMap { token, k, entries })
}

/// Printable name of a token for reports.
pub fn token_label(t: Token) -> String {
    if let Some(f) = Fence::from_token(t) {
        return f.text().to_owned();
    }
    match t {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        t if t < BYTE_TOKENS => {
            let b = t as u8;
            if b.is_ascii_graphic() {
                (b as char).to_string()
            } else {
                format!("\\x{b:02x}")
            }
        }
        t => format!("<|{t}|>"),
    }
}

impl ActivationMap {
    pub fn rank_of(&self, neuron: NeuronRef) -> Option<usize> {
        self.entries.iter().position(|e| e.neuron == neuron)
    }

    /// Columns `layer,neuron,score,top_tokens`; the token list is tab-joined.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "layer,neuron,score,top_tokens")?;
        for e in &self.entries {
            let tokens: Vec<String> = e.top_tokens.iter().map(|&t| token_label(t)).collect();
            let joined = tokens.join("\t").replace('"', "\"\"");
            writeln!(
                w,
                "{},{},{:e},\"{}\"",
                e.neuron.layer, e.neuron.neuron, e.score, joined
            )?;
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmplifyMode {
    Add,
    Set,
}

impl std::str::FromStr for AmplifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(AmplifyMode::Add),
            "set" => Ok(AmplifyMode::Set),
            _ => Err(Error::InvalidArgument(format!("unknown amplify mode {s:?}"))),
        }
    }
}

/// A hook that edits one neuron at the `mlp_hidden` site.
pub fn amplify_hook(
    config: &ModelConfig,
    neuron: NeuronRef,
    mode: AmplifyMode,
    amount: f32,
) -> Result<HookSet> {
    neuron.validate(config)?;
    let site = TapSite::new(neuron.layer, SiteKind::MlpHidden);
    let edit = match mode {
        AmplifyMode::Add => Edit::AddNeuron {
            index: neuron.neuron,
            delta: amount,
        },
        AmplifyMode::Set => Edit::SetNeuron {
            index: neuron.neuron,
            value: amount,
        },
    };
    HookSet::new().with(site, edit)
}

/// A model with one planted feature neuron for `target`.
///
/// The last residual coordinate is reserved: no embedding other than the
/// target's, and no block output except the planted neuron's, writes to it.
/// The target embedding (and LM-head row, since the head is tied to the
/// embedding) points along that coordinate, and so do the planted neuron's
/// effective weight row and its `W_down` column. The planted neuron is
/// therefore silent on inputs without the target token, and amplifying it
/// raises only the target's logit.
pub fn planted_fixture(
    config: &ModelConfig,
    target: Token,
    neuron: NeuronRef,
) -> Result<ModelParams> {
    neuron.validate(config)?;
    if target as usize >= config.vocab_size {
        return Err(Error::TokenOutOfVocab {
            token: target,
            vocab: config.vocab_size,
        });
    }
    let mut p = ModelParams::init(config)?;
    let d = config.hidden_dim;
    let last = d - 1;
    for r in 0..config.vocab_size {
        p.token_embedding.set(r, last, 0.0);
    }
    for r in 0..config.max_seq_len {
        p.position_embedding.set(r, last, 0.0);
    }
    for lp in &mut p.layers {
        lp.wo.row_mut(last).iter_mut().for_each(|x| *x = 0.0);
        lp.w_down.row_mut(last).iter_mut().for_each(|x| *x = 0.0);
    }
    let row = p.token_embedding.row_mut(target as usize);
    row.iter_mut().for_each(|x| *x = 0.0);
    row[last] = 10.0;
    p.lm_head = p.token_embedding.clone();
    p.lm_bias.iter_mut().for_each(|b| *b = 0.0);

    let lp = &mut p.layers[neuron.layer];
    lp.w_gate.row_mut(neuron.neuron).iter_mut().for_each(|x| *x = 30.0);
    let up = lp.w_up.row_mut(neuron.neuron);
    up.iter_mut().for_each(|x| *x = 0.0);
    up[last] = 50.0;
    for r in 0..d {
        lp.w_down.set(r, neuron.neuron, if r == last { 1.0 } else { 0.0 });
    }
    Ok(p)
}
