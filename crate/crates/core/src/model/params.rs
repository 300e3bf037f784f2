use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{self, PayloadReader};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STLB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights of one decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    /// F×D
    pub w_gate: Matrix,
    /// F×D
    pub w_up: Matrix,
    /// D×F
    pub w_down: Matrix,
}

/// All weights of the model. Immutable once built; share by reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// V×D
    pub token_embedding: Matrix,
    /// max_seq_len×D
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    /// V×D
    pub lm_head: Matrix,
    pub lm_bias: Vec<f32>,
}

impl ModelParams {
    /// Gaussian init with standard deviation `1/sqrt(D)`, unit norm gains, zero LM bias.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.hidden_dim as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
        };
        let (d, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
        let token_embedding = gauss(v, d);
        let position_embedding = gauss(config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                attn_norm: vec![1.0; d],
                wq: gauss(d, d),
                wk: gauss(d, d),
                wv: gauss(d, d),
                wo: gauss(d, d),
                mlp_norm: vec![1.0; d],
                w_gate: gauss(f, d),
                w_up: gauss(f, d),
                w_down: gauss(d, f),
            })
            .collect();
        let lm_head = gauss(v, d);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            lm_head,
            lm_bias: vec![0.0; v],
        })
    }

    /// All tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.token_embedding.as_slice(),
            self.position_embedding.as_slice(),
        ];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.mlp_norm.as_slice(),
                l.w_gate.as_slice(),
                l.w_up.as_slice(),
                l.w_down.as_slice(),
            ]);
        }
        out.push(self.lm_head.as_slice());
        out.push(self.lm_bias.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.token_embedding.as_mut_slice(),
            self.position_embedding.as_mut_slice(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.attn_norm.as_mut_slice(),
                l.wq.as_mut_slice(),
                l.wk.as_mut_slice(),
                l.wv.as_mut_slice(),
                l.wo.as_mut_slice(),
                l.mlp_norm.as_mut_slice(),
                l.w_gate.as_mut_slice(),
                l.w_up.as_mut_slice(),
                l.w_down.as_mut_slice(),
            ]);
        }
        out.push(self.lm_head.as_mut_slice());
        out.push(self.lm_bias.as_mut_slice());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_container(
            w,
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &self.config,
            &self.tensors(),
        )
    }

    /// Serialized checkpoint bytes; also the input for provenance hashes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let raw = container::read_container::<_, ModelConfig>(
            r,
            CHECKPOINT_MAGIC,
            &[CHECKPOINT_VERSION],
        )?;
        let config = raw.header;
        let mut params = Self::zeros(&config)?;
        let total: usize = params.tensors().iter().map(|t| t.len()).sum();
        let mut payload = PayloadReader::new(&raw.payload, total as u64)?;
        for t in params.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&payload.take(n));
        }
        if !params.all_finite() {
            return Err(Error::Config("checkpoint contains non-finite weights".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// Zero-filled parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(v, d),
            position_embedding: Matrix::zeros(config.max_seq_len, d),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    attn_norm: vec![0.0; d],
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    mlp_norm: vec![0.0; d],
                    w_gate: Matrix::zeros(f, d),
                    w_up: Matrix::zeros(f, d),
                    w_down: Matrix::zeros(d, f),
                })
                .collect(),
            lm_head: Matrix::zeros(v, d),
            lm_bias: vec![0.0; v],
        })
    }
}

/// Alias kept for call sites that read like the pipeline stage.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    ModelParams::init(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            max_seq_len: 16,
            seed: 1,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small()).unwrap();
        let b = init_params(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_params(&small()).unwrap();
        let b = init_params(&ModelConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shapes_follow_config() {
        let p = init_params(&small()).unwrap();
        assert_eq!(
            (p.token_embedding.rows(), p.token_embedding.cols()),
            (512, 64)
        );
        assert_eq!((p.layers[0].w_gate.rows(), p.layers[0].w_gate.cols()), (128, 64));
        assert_eq!((p.layers[1].w_down.rows(), p.layers[1].w_down.cols()), (64, 128));
        assert_eq!(p.lm_bias.len(), 512);
        let total: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, small().param_count().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&small()).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"STLB");
        let q = ModelParams::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let p = init_params(&small()).unwrap();
        let bytes = p.to_bytes();
        let err = ModelParams::read(&mut &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::SizeMismatch { .. }));
    }
}
