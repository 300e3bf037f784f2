use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax};
use crate::model::forward::{run, LogitRows};
use crate::model::{HookSet, Intervention, ModelParams};
use crate::tokenizer::{Token, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`; temperature 0 yields a one-hot at the
/// argmax (lowest index on ties).
pub fn next_token_distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let mut p = vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        return p;
    }
    softmax(logits, temperature)
}

/// Inverse-CDF draw; returns the last index with nonzero mass if rounding
/// leaves `u` past the cumulative total.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last
}

/// Autoregressive generation with static hooks.
pub fn generate(
    params: &ModelParams,
    prompt: &[Token],
    settings: &GenerationSettings,
    hooks: &HookSet,
) -> Result<Vec<Token>> {
    hooks.validate(&params.config)?;
    let mut hooks = hooks.clone();
    generate_with(params, prompt, settings, &mut hooks)
}

/// Autoregressive generation; the intervention runs inside every forward pass.
/// The output excludes the prompt and ends at EOS (included) or `max_new_tokens`.
pub fn generate_with(
    params: &ModelParams,
    prompt: &[Token],
    settings: &GenerationSettings,
    intervention: &mut dyn Intervention<f32>,
) -> Result<Vec<Token>> {
    settings.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let needed = prompt.len() + settings.max_new_tokens;
    if needed > params.config.max_seq_len {
        return Err(Error::ContextOverflow {
            needed,
            limit: params.config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(settings.max_new_tokens);
    for _ in 0..settings.max_new_tokens {
        let (logits, _) = run::<f32>(params, &seq, &[], intervention, None, LogitRows::Last)?;
        let probs = next_token_distribution(logits.last(), settings.temperature);
        let next = if settings.temperature <= 0.0 {
            argmax(&probs)
        } else {
            sample_index(&probs, &mut rng)
        } as Token;
        seq.push(next);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}
