//! ATRC activation traces: one file per (prompt, style) holding every layer's
//! activations at a set of sites, so recorded activations from external
//! models feed the same difference, clustering and probe code as the toy
//! model.
//!
//! Layout: `b"ATRC"`, `u32` version, `u64` header length, canonical JSON
//! header, then for each listed site an `L × tokens × dim` little-endian
//! `f32` tensor.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, PayloadReader};
use crate::error::{Error, Result};
use crate::model::{capture, NoIntervention, ModelParams, SiteKind, TapSite};
use crate::steering::{pair_tokens, subtract_layers, DiffSet, PromptPair, Reduction};

pub const TRACE_MAGIC: [u8; 4] = *b"ATRC";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_DTYPE: &str = "f32-le";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Positive,
    Negative,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub magic: String,
    pub version: u32,
    pub model_id: String,
    pub num_layers: usize,
    /// Width of each recorded site kind.
    pub dims: BTreeMap<SiteKind, usize>,
    /// Tensor order in the payload.
    pub sites: Vec<SiteKind>,
    pub token_count: usize,
    /// Index of the first answer token; answer positions are `answer_start..token_count`.
    pub answer_start: usize,
    pub prompt_id: String,
    pub style: Style,
    pub dtype: String,
}

impl TraceHeader {
    pub fn new(
        model_id: impl Into<String>,
        prompt_id: impl Into<String>,
        style: Style,
        num_layers: usize,
        dims: BTreeMap<SiteKind, usize>,
        sites: Vec<SiteKind>,
        token_count: usize,
        answer_start: usize,
    ) -> Self {
        Self {
            magic: String::from_utf8_lossy(&TRACE_MAGIC).into_owned(),
            version: TRACE_VERSION,
            model_id: model_id.into(),
            num_layers,
            dims,
            sites,
            token_count,
            answer_start,
            prompt_id: prompt_id.into(),
            style,
            dtype: TRACE_DTYPE.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magic.as_bytes() != TRACE_MAGIC {
            return Err(Error::BadMagic {
                expected: "ATRC".into(),
                found: self.magic.clone(),
            });
        }
        if self.version != TRACE_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.dtype != TRACE_DTYPE {
            return Err(Error::Config(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.num_layers == 0 || self.token_count == 0 {
            return Err(Error::Config("trace needs at least one layer and one token".into()));
        }
        if self.answer_start >= self.token_count {
            return Err(Error::Config(format!(
                "answer_start {} outside {} tokens",
                self.answer_start, self.token_count
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.sites {
            if !seen.insert(s) {
                return Err(Error::Config(format!("site {s} listed twice")));
            }
            match self.dims.get(s) {
                Some(&d) if d > 0 => {}
                _ => return Err(Error::Config(format!("no positive width for site {s}"))),
            }
        }
        Ok(())
    }

    pub fn tensor_len(&self, site: SiteKind) -> usize {
        self.num_layers * self.token_count * self.dims.get(&site).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    /// One tensor per entry of `header.sites`.
    pub tensors: Vec<Vec<f32>>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.tensors.len() != self.header.sites.len() {
            return Err(Error::Shape(format!(
                "{} tensors for {} sites",
                self.tensors.len(),
                self.header.sites.len()
            )));
        }
        for (site, t) in self.header.sites.iter().zip(&self.tensors) {
            let expected = self.header.tensor_len(*site);
            if t.len() != expected {
                return Err(Error::Shape(format!(
                    "site {site}: {} values, header implies {expected}",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    /// `tokens × dim` activations of one layer at `site`.
    pub fn layer(&self, site: SiteKind, layer: usize) -> Result<&[f32]> {
        let idx = self
            .header
            .sites
            .iter()
            .position(|s| *s == site)
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no {site} site")))?;
        if layer >= self.header.num_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        let n = self.header.token_count * self.header.dims[&site];
        Ok(&self.tensors[idx][layer * n..(layer + 1) * n])
    }

    /// Per-layer reduced activations over the answer span at `site`.
    pub fn reduce(&self, site: SiteKind, reduction: Reduction) -> Result<Vec<Vec<f32>>> {
        let dim = *self
            .header
            .dims
            .get(&site)
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no {site} site")))?;
        (0..self.header.num_layers)
            .map(|l| {
                reduction.apply(
                    self.layer(site, l)?,
                    dim,
                    self.header.answer_start,
                    self.header.token_count,
                )
            })
            .collect()
    }
}

/// Validates shapes, then writes the file. Nothing is created on a shape error.
pub fn write_trace(trace: &TraceFile, path: &Path) -> Result<()> {
    trace.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let tensors: Vec<&[f32]> = trace.tensors.iter().map(Vec::as_slice).collect();
    write_container(&mut w, &TRACE_MAGIC, TRACE_VERSION, &trace.header, &tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let raw = read_container::<_, TraceHeader>(
        &mut BufReader::new(File::open(path)?),
        &TRACE_MAGIC,
        &[TRACE_VERSION],
    )?;
    let header = raw.header;
    header.validate()?;
    let sizes: Vec<usize> = header.sites.iter().map(|s| header.tensor_len(*s)).collect();
    let mut payload = PayloadReader::new(&raw.payload, sizes.iter().sum::<usize>() as u64)?;
    let tensors = sizes.iter().map(|&n| payload.take(n)).collect();
    let trace = TraceFile { header, tensors };
    trace.validate()?;
    Ok(trace)
}

/// Records `question ⧺ answer` through the toy model at every layer of `sites`.
pub fn record_trace(
    params: &ModelParams,
    model_id: &str,
    prompt_id: &str,
    question: &str,
    answer: &str,
    style: Style,
    sites: &[SiteKind],
) -> Result<TraceFile> {
    let (tokens, start) = pair_tokens(question, answer)?;
    let cfg = &params.config;
    let taps: Vec<TapSite> = sites
        .iter()
        .flat_map(|&s| (0..cfg.num_layers).map(move |l| TapSite::new(l, s)))
        .collect();
    let trace = capture(params, &tokens, &taps, &mut NoIntervention)?;
    let tensors = sites
        .iter()
        .map(|&s| {
            (0..cfg.num_layers)
                .flat_map(|l| {
                    trace
                        .get(&TapSite::new(l, s))
                        .expect("requested tap captured")
                        .as_slice()
                        .iter()
                        .copied()
                })
                .collect()
        })
        .collect();
    let dims = sites.iter().map(|&s| (s, s.dim(cfg))).collect();
    let header = TraceHeader::new(
        model_id,
        prompt_id,
        style,
        cfg.num_layers,
        dims,
        sites.to_vec(),
        tokens.len(),
        start,
    );
    let file = TraceFile { header, tensors };
    file.validate()?;
    Ok(file)
}

/// Positive and negative traces for one pair.
pub fn record_pair_traces(
    params: &ModelParams,
    model_id: &str,
    pair: &PromptPair,
    sites: &[SiteKind],
) -> Result<(TraceFile, TraceFile)> {
    Ok((
        record_trace(params, model_id, &pair.id, &pair.question, &pair.positive, Style::Positive, sites)?,
        record_trace(params, model_id, &pair.id, &pair.question, &pair.negative, Style::Negative, sites)?,
    ))
}

/// Δ from recorded traces, paired by prompt id, in the order of `positive`.
pub fn diffs_from_traces(
    positive: &[TraceFile],
    negative: &[TraceFile],
    site: SiteKind,
    reduction: Reduction,
) -> Result<DiffSet> {
    if positive.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let mut by_id: HashMap<&str, &TraceFile> = HashMap::new();
    for t in negative {
        if by_id.insert(t.header.prompt_id.as_str(), t).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate negative trace for {:?}",
                t.header.prompt_id
            )));
        }
    }
    if negative.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} positive traces but {} negative traces",
            positive.len(),
            negative.len()
        )));
    }
    let first = &positive[0].header;
    let mut ids = Vec::with_capacity(positive.len());
    let mut deltas = Vec::with_capacity(positive.len());
    for p in positive {
        let id = &p.header.prompt_id;
        let n = by_id
            .remove(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no negative trace for prompt {id:?}")))?;
        for h in [&p.header, &n.header] {
            if h.num_layers != first.num_layers || h.dims.get(&site) != first.dims.get(&site) {
                return Err(Error::Shape(format!(
                    "trace for {id:?} disagrees in layer count or {site} width"
                )));
            }
        }
        deltas.push(subtract_layers(&p.reduce(site, reduction)?, &n.reduce(site, reduction)?)?);
        ids.push(id.clone());
    }
    DiffSet::new(site, reduction, ids, deltas)
}
