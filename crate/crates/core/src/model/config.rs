use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::RESERVED_TOKENS;

/// Shape and seed of the miniature decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale bilingual model: 2 layers, width 64, 128 MLP neurons.
    pub fn toy(seed: u64) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 520,
            max_seq_len: 96,
            seed,
        }
    }

    /// Checks structural invariants. A zero-layer stack is accepted as the
    /// degenerate embed-then-decode model.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} below the {RESERVED_TOKENS} reserved byte/fence/control tokens",
                self.vocab_size
            )));
        }
        self.param_count()?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Total number of scalar parameters; errors on `usize` overflow.
    pub fn param_count(&self) -> Result<usize> {
        let overflow = || Error::Config("parameter count overflows usize".into());
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let per_layer = d
            .checked_mul(d)
            .and_then(|dd| dd.checked_mul(4))
            .and_then(|a| f.checked_mul(d)?.checked_mul(3)?.checked_add(a))
            .and_then(|a| a.checked_add(2 * d))
            .ok_or_else(overflow)?;
        let layers = per_layer
            .checked_mul(self.num_layers)
            .ok_or_else(overflow)?;
        let embed = self
            .vocab_size
            .checked_mul(d)
            .and_then(|v| v.checked_mul(2))
            .and_then(|v| v.checked_add(self.max_seq_len.checked_mul(d)?))
            .and_then(|v| v.checked_add(self.vocab_size))
            .ok_or_else(overflow)?;
        layers.checked_add(embed).ok_or_else(overflow)
    }
}
