use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, PayloadReader};
use crate::error::{Error, Result};
use crate::model::SiteKind;
use crate::steering::{kmeans, train_probes, DiffSet, KMeansOptions, Probe, ProbeTrainOptions, Reduction};

pub const STEERING_MAGIC: [u8; 4] = *b"STRM";
pub const STEERING_VERSION: u32 = 1;

/// Centroids `c[k][ℓ]`, one probe per layer, and the injection strength.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringModel {
    pub classes: usize,
    pub layers: usize,
    pub dim: usize,
    pub site: SiteKind,
    pub reduction: Reduction,
    pub alpha: f64,
    /// `C × L × D`, row-major.
    pub centroids: Vec<f32>,
    pub probes: Vec<Probe>,
    /// Cluster of each training prompt.
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SteeringHeader {
    classes: usize,
    layers: usize,
    dim: usize,
    site: SiteKind,
    reduction: Reduction,
    alpha: f64,
    labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub classes: usize,
    pub alpha: f64,
    pub kmeans: KMeansOptions,
    pub probes: ProbeTrainOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            classes: 4,
            alpha: 1.0,
            kmeans: KMeansOptions::default(),
            probes: ProbeTrainOptions::default(),
        }
    }
}

impl SteeringModel {
    /// Clusters the flattened Δ and fits per-layer probes to the cluster labels.
    pub fn fit(diffs: &DiffSet, opts: &FitOptions) -> Result<Self> {
        let points = diffs.all_flattened();
        let km = kmeans(&points, opts.classes, &opts.kmeans)?;
        Self::from_clusters(diffs, &km.centroids, &km.labels, opts.alpha, &opts.probes)
    }

    /// Fits probes to precomputed cluster labels. `centroids` are flattened
    /// over layers, one per class.
    pub fn from_clusters(
        diffs: &DiffSet,
        centroids: &[Vec<f64>],
        labels: &[usize],
        alpha: f64,
        probe_opts: &ProbeTrainOptions,
    ) -> Result<Self> {
        let classes = centroids.len();
        let width = diffs.num_layers() * diffs.dim();
        if centroids.iter().any(|c| c.len() != width) {
            return Err(Error::Shape(format!("centroids must have {width} entries")));
        }
        let probes = train_probes(diffs, labels, classes, probe_opts)?;
        let model = Self {
            classes,
            layers: diffs.num_layers(),
            dim: diffs.dim(),
            site: diffs.site,
            reduction: diffs.reduction,
            alpha,
            centroids: centroids.iter().flatten().map(|&x| x as f32).collect(),
            probes,
            labels: labels.to_vec(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.len() != self.classes * self.layers * self.dim {
            return Err(Error::Shape(format!(
                "{} centroid values for C={} L={} D={}",
                self.centroids.len(),
                self.classes,
                self.layers,
                self.dim
            )));
        }
        if self.centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite centroid".into()));
        }
        if self.probes.len() != self.layers {
            return Err(Error::Shape(format!(
                "{} probes for {} layers",
                self.probes.len(),
                self.layers
            )));
        }
        for p in &self.probes {
            if p.classes != self.classes
                || p.dim != self.dim
                || p.weight.len() != self.classes * self.dim
                || p.bias.len() != self.classes
            {
                return Err(Error::Shape("probe shape disagrees with the centroids".into()));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        Ok(())
    }

    pub fn centroid(&self, class: usize, layer: usize) -> &[f32] {
        let start = (class * self.layers + layer) * self.dim;
        &self.centroids[start..start + self.dim]
    }

    /// Flattened cross-layer centroid, widened to `f64`.
    pub fn flat_centroid(&self, class: usize) -> Vec<f64> {
        let n = self.layers * self.dim;
        self.centroids[class * n..(class + 1) * n]
            .iter()
            .map(|&x| x as f64)
            .collect()
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        let header = SteeringHeader {
            classes: self.classes,
            layers: self.layers,
            dim: self.dim,
            site: self.site,
            reduction: self.reduction,
            alpha: self.alpha,
            labels: self.labels.clone(),
        };
        let mut tensors: Vec<&[f32]> = vec![&self.centroids];
        for p in &self.probes {
            tensors.push(&p.weight);
            tensors.push(&p.bias);
        }
        write_container(w, &STEERING_MAGIC, STEERING_VERSION, &header, &tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let raw = read_container::<_, SteeringHeader>(r, &STEERING_MAGIC, &[STEERING_VERSION])?;
        let h = raw.header;
        let (c, l, d) = (h.classes, h.layers, h.dim);
        let expected = c * l * d + l * (c * d + c);
        let mut payload = PayloadReader::new(&raw.payload, expected as u64)?;
        let centroids = payload.take(c * l * d);
        let probes = (0..l)
            .map(|_| Probe {
                classes: c,
                dim: d,
                weight: payload.take(c * d),
                bias: payload.take(c),
            })
            .collect();
        let model = Self {
            classes: c,
            layers: l,
            dim: d,
            site: h.site,
            reduction: h.reduction,
            alpha: h.alpha,
            centroids,
            probes,
            labels: h.labels,
        };
        model.validate()?;
        Ok(model)
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
}
