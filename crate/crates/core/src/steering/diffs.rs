use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, PayloadReader};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};
use crate::model::{capture, NoIntervention, ModelParams, SiteKind, TapSite};
use crate::steering::PromptPair;
use crate::tokenizer::{self, Token};

pub const DIFFSET_MAGIC: [u8; 4] = *b"STDF";
pub const DIFFSET_VERSION: u32 = 1;

/// How answer-token activations collapse to one vector per layer.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    FinalToken,
    MeanAnswerTokens,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::FinalToken => "final_token",
            Reduction::MeanAnswerTokens => "mean_answer_tokens",
        }
    }

    /// Reduces rows `start..end` of a `rows × dim` activation block.
    pub fn apply(self, acts: &[f32], dim: usize, start: usize, end: usize) -> Result<Vec<f32>> {
        if start >= end || end * dim > acts.len() {
            return Err(Error::InvalidArgument(format!(
                "empty or out-of-range answer span {start}..{end}"
            )));
        }
        Ok(match self {
            Reduction::FinalToken => acts[(end - 1) * dim..end * dim].to_vec(),
            Reduction::MeanAnswerTokens => {
                let mut sum = vec![0.0f64; dim];
                for row in acts[start * dim..end * dim].chunks_exact(dim) {
                    for (s, &a) in sum.iter_mut().zip(row) {
                        *s += a as f64;
                    }
                }
                let n = (end - start) as f64;
                sum.into_iter().map(|s| (s / n) as f32).collect()
            }
        })
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_token" | "final" => Ok(Reduction::FinalToken),
            "mean_answer_tokens" | "mean" => Ok(Reduction::MeanAnswerTokens),
            _ => Err(Error::InvalidArgument(format!("unknown reduction {s:?}"))),
        }
    }
}

/// Tokens of `question ⧺ answer` (with BOS) and the index of the first answer token.
pub fn pair_tokens(question: &str, answer: &str) -> Result<(Vec<Token>, usize)> {
    let mut tokens = tokenizer::encode_prompt(question);
    let start = tokens.len();
    let answer = tokenizer::encode(answer);
    if answer.is_empty() {
        return Err(Error::InvalidArgument("answer is empty after tokenization".into()));
    }
    tokens.extend(answer);
    Ok((tokens, start))
}

/// Per-layer reduced activations of `question ⧺ answer` at `site`, over answer positions.
pub fn answer_activations(
    params: &ModelParams,
    question: &str,
    answer: &str,
    site: SiteKind,
    reduction: Reduction,
) -> Result<Vec<Vec<f32>>> {
    let (tokens, start) = pair_tokens(question, answer)?;
    let taps: Vec<TapSite> = (0..params.config.num_layers)
        .map(|l| TapSite::new(l, site))
        .collect();
    let trace = capture(params, &tokens, &taps, &mut NoIntervention)?;
    let dim = site.dim(&params.config);
    taps.iter()
        .map(|t| {
            let m = trace.get(t).expect("requested tap captured");
            reduction.apply(m.as_slice(), dim, start, tokens.len())
        })
        .collect()
}

/// Reduced per-layer activations for the positive and negative completions.
pub fn extract_pair_activations(
    params: &ModelParams,
    pair: &PromptPair,
    site: SiteKind,
    reduction: Reduction,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    pair.validate()?;
    Ok((
        answer_activations(params, &pair.question, &pair.positive, site, reduction)?,
        answer_activations(params, &pair.question, &pair.negative, site, reduction)?,
    ))
}

pub(crate) fn subtract_layers(pos: &[Vec<f32>], neg: &[Vec<f32>]) -> Result<Matrix> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::Shape(format!(
            "layer counts differ ({} vs {})",
            pos.len(),
            neg.len()
        )));
    }
    let dim = pos[0].len();
    let mut data = Vec::with_capacity(pos.len() * dim);
    for (p, n) in pos.iter().zip(neg) {
        if p.len() != dim || n.len() != dim {
            return Err(Error::Shape("activation widths differ".into()));
        }
        data.extend(p.iter().zip(n).map(|(a, b)| a - b));
    }
    Ok(Matrix::from_vec(pos.len(), dim, data))
}

/// Style-difference vectors: one `L × D` matrix per prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffSet {
    pub site: SiteKind,
    pub reduction: Reduction,
    pub ids: Vec<String>,
    pub deltas: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct DiffSetHeader {
    site: SiteKind,
    reduction: Reduction,
    layers: usize,
    dim: usize,
    ids: Vec<String>,
}

impl DiffSet {
    pub fn new(
        site: SiteKind,
        reduction: Reduction,
        ids: Vec<String>,
        deltas: Vec<Matrix>,
    ) -> Result<Self> {
        let set = Self {
            site,
            reduction,
            ids,
            deltas,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.deltas.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} difference vectors",
                self.ids.len(),
                self.deltas.len()
            )));
        }
        if let Some(first) = self.deltas.first() {
            let (l, d) = (first.rows(), first.cols());
            for (id, m) in self.ids.iter().zip(&self.deltas) {
                if m.rows() != l || m.cols() != d {
                    return Err(Error::Shape(format!("prompt {id:?} has a differently shaped Δ")));
                }
                if m.as_slice().iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument(format!("prompt {id:?} has a non-finite Δ")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.deltas.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.deltas.first().map_or(0, Matrix::cols)
    }

    pub fn layer(&self, prompt: usize, layer: usize) -> &[f32] {
        self.deltas[prompt].row(layer)
    }

    /// Cross-layer concatenation of prompt `i`, widened to `f64`.
    pub fn flattened(&self, i: usize) -> Vec<f64> {
        self.deltas[i].as_slice().iter().map(|&x| x as f64).collect()
    }

    pub fn all_flattened(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.flattened(i)).collect()
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.deltas {
            m.as_mut_slice().iter_mut().for_each(|x| *x = -*x);
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        let header = DiffSetHeader {
            site: self.site,
            reduction: self.reduction,
            layers: self.num_layers(),
            dim: self.dim(),
            ids: self.ids.clone(),
        };
        let tensors: Vec<&[f32]> = self.deltas.iter().map(Matrix::as_slice).collect();
        write_container(w, &DIFFSET_MAGIC, DIFFSET_VERSION, &header, &tensors)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let raw = read_container::<_, DiffSetHeader>(r, &DIFFSET_MAGIC, &[DIFFSET_VERSION])?;
        let h = raw.header;
        let per = h.layers * h.dim;
        let mut payload = PayloadReader::new(&raw.payload, (per * h.ids.len()) as u64)?;
        let deltas = (0..h.ids.len())
            .map(|_| Matrix::from_vec(h.layers, h.dim, payload.take(per)))
            .collect();
        Self::new(h.site, h.reduction, h.ids, deltas)
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

    /// One row per prompt: `id` then the flattened Δ (`l{layer}_{index}` columns).
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "id")?;
        for l in 0..self.num_layers() {
            for j in 0..self.dim() {
                write!(w, ",l{l}_{j}")?;
            }
        }
        writeln!(w)?;
        for (id, m) in self.ids.iter().zip(&self.deltas) {
            write!(w, "{}", csv_field(id))?;
            for x in m.as_slice() {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\t']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Δ for every pair: positive minus negative reduced activations, per layer.
pub fn diff_vectors(
    params: &ModelParams,
    pairs: &[PromptPair],
    site: SiteKind,
    reduction: Reduction,
) -> Result<DiffSet> {
    use rayon::prelude::*;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no prompt pairs".into()));
    }
    let deltas = pairs
        .par_iter()
        .map(|pair| {
            let (pos, neg) = extract_pair_activations(params, pair, site, reduction)?;
            subtract_layers(&pos, &neg)
        })
        .collect::<Result<Vec<_>>>()?;
    DiffSet::new(
        site,
        reduction,
        pairs.iter().map(|p| p.id.clone()).collect(),
        deltas,
    )
}

/// Mean ℓ2 norm of Δ at each layer.
pub fn layer_norm_profile(diffs: &DiffSet) -> Result<Vec<f64>> {
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("empty DiffSet".into()));
    }
    let n = diffs.len() as f64;
    Ok((0..diffs.num_layers())
        .map(|l| {
            (0..diffs.len())
                .map(|i| l2_norm(diffs.layer(i, l)))
                .sum::<f64>()
                / n
        })
        .collect())
}
