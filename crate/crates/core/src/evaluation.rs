//! Measurement protocol: output-language detection, repeated-sampling
//! preference benchmarks, probe accuracy and macro-F1 over template
//! ensembles, and a wall-clock timing harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProblemRecord, TemplateSet};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::seed::derive_seed;
use crate::steering::{answer_activations, csv_field, nearest, PromptPair, SteeringModel};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageLabel {
    Python,
    Cpp,
    Java,
    Julia,
    Unknown,
}

impl LanguageLabel {
    pub const ALL: [LanguageLabel; 5] = [
        LanguageLabel::Python,
        LanguageLabel::Cpp,
        LanguageLabel::Java,
        LanguageLabel::Julia,
        LanguageLabel::Unknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LanguageLabel::Python => "python",
            LanguageLabel::Cpp => "cpp",
            LanguageLabel::Java => "java",
            LanguageLabel::Julia => "julia",
            LanguageLabel::Unknown => "unknown",
        }
    }

    fn from_fence_tag(tag: &str) -> Option<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "python" | "py" | "python3" => Some(LanguageLabel::Python),
            "cpp" | "c++" | "cxx" => Some(LanguageLabel::Cpp),
            "java" => Some(LanguageLabel::Java),
            "julia" | "jl" => Some(LanguageLabel::Julia),
            _ => None,
        }
    }
}

/// Keyword fallback, checked in this order when no recognized fence exists.
const FALLBACK: [(LanguageLabel, &[&str]); 4] = [
    (LanguageLabel::Cpp, &["#include", "std::", "int main(", "cout <<"]),
    (LanguageLabel::Java, &["public static void", "System.out.println", "public class "]),
    (LanguageLabel::Julia, &["using LinearAlgebra", "end # function"]),
    (LanguageLabel::Python, &["def ", "import numpy", "print("]),
];

fn looks_like_julia(text: &str) -> bool {
    text.lines().any(|l| l.trim_start().starts_with("function "))
        && text.lines().any(|l| l.trim() == "end")
}

/// Language of a model output: the first recognized markdown fence tag wins;
/// otherwise the keyword table is consulted in the order cpp, java, julia, python.
pub fn detect_language(text: &str) -> LanguageLabel {
    let mut rest = text;
    while let Some(pos) = rest.find("```") {
        let after = &rest[pos + 3..];
        let tag: String = after
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '+' || *c == '#')
            .collect();
        if let Some(label) = LanguageLabel::from_fence_tag(&tag) {
            return label;
        }
        rest = after;
    }
    for (label, keys) in FALLBACK {
        if keys.iter().any(|k| text.contains(k))
            || (label == LanguageLabel::Julia && looks_like_julia(text))
        {
            return label;
        }
    }
    LanguageLabel::Unknown
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub reps: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            reps: 25,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// What a generator is asked for in one benchmark cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub rep: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemCounts {
    pub name: String,
    pub counts: BTreeMap<LanguageLabel, usize>,
    pub percentages: BTreeMap<LanguageLabel, f64>,
    /// Generator failures, counted as unknown.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub settings: BenchSettings,
    pub problems: Vec<ProblemCounts>,
    pub aggregate: BTreeMap<LanguageLabel, f64>,
    pub total_samples: usize,
}

fn percentages(counts: &BTreeMap<LanguageLabel, usize>, total: usize) -> BTreeMap<LanguageLabel, f64> {
    counts
        .iter()
        .map(|(&l, &c)| (l, 100.0 * c as f64 / total as f64))
        .collect()
}

/// Samples every problem `reps` times with per-cell derived seeds and
/// tallies the detected languages.
pub fn run_preference_benchmark<G>(
    generator: G,
    problems: &[ProblemRecord],
    settings: &BenchSettings,
) -> Result<BenchmarkReport>
where
    G: Fn(&ProblemRecord, &SampleRequest) -> Result<String> + Sync,
{
    if settings.reps == 0 {
        return Err(Error::InvalidArgument("reps must be >= 1".into()));
    }
    if !(settings.temperature >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be >= 0".into()));
    }
    let cells: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..settings.reps).map(move |r| (p, r)))
        .collect();
    let labels: Vec<Option<LanguageLabel>> = cells
        .par_iter()
        .map(|&(p, r)| {
            let req = SampleRequest {
                rep: r,
                temperature: settings.temperature,
                seed: derive_seed(settings.seed, p as u64, r as u64),
            };
            generator(&problems[p], &req).ok().map(|t| detect_language(&t))
        })
        .collect();

    let mut totals: BTreeMap<LanguageLabel, usize> =
        LanguageLabel::ALL.iter().map(|&l| (l, 0)).collect();
    let mut rows = Vec::with_capacity(problems.len());
    for (p, problem) in problems.iter().enumerate() {
        let mut counts: BTreeMap<LanguageLabel, usize> =
            LanguageLabel::ALL.iter().map(|&l| (l, 0)).collect();
        let mut failures = 0;
        for label in &labels[p * settings.reps..(p + 1) * settings.reps] {
            let l = label.unwrap_or_else(|| {
                failures += 1;
                LanguageLabel::Unknown
            });
            *counts.get_mut(&l).expect("all labels present") += 1;
            *totals.get_mut(&l).expect("all labels present") += 1;
        }
        rows.push(ProblemCounts {
            name: problem.name.clone(),
            percentages: percentages(&counts, settings.reps),
            counts,
            failures,
        });
    }
    let total = cells.len();
    Ok(BenchmarkReport {
        settings: settings.clone(),
        problems: rows,
        aggregate: if total == 0 {
            LanguageLabel::ALL.iter().map(|&l| (l, 0.0)).collect()
        } else {
            percentages(&totals, total)
        },
        total_samples: total,
    })
}

impl BenchmarkReport {
    /// Fraction (0..=1) of all samples detected as `label`.
    pub fn rate(&self, label: LanguageLabel) -> f64 {
        self.aggregate.get(&label).copied().unwrap_or(0.0) / 100.0
    }

    /// Stacked-percentage rows: one per problem plus an `ALL` row.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "problem")?;
        for l in LanguageLabel::ALL {
            write!(w, ",{}", l.name())?;
        }
        writeln!(w)?;
        for row in &self.problems {
            write!(w, "{}", csv_field(&row.name))?;
            for l in LanguageLabel::ALL {
                write!(w, ",{:.4}", row.percentages[&l])?;
            }
            writeln!(w)?;
        }
        write!(w, "ALL")?;
        for l in LanguageLabel::ALL {
            write!(w, ",{:.4}", self.aggregate[&l])?;
        }
        writeln!(w)?;
        Ok(())
    }
}

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "label vectors differ in length ({} vs {})",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty label vectors".into()));
    }
    Ok(())
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over all `classes`; a class whose
/// precision or recall has a zero denominator scores 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    check_lengths(truth, pred)?;
    if classes == 0 {
        return Err(Error::InvalidArgument("classes must be >= 1".into()));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|k| {
            if tp[k] + fp[k] == 0 || tp[k] + fneg[k] == 0 {
                return 0.0;
            }
            let precision = tp[k] as f64 / (tp[k] + fp[k]) as f64;
            let recall = tp[k] as f64 / (tp[k] + fneg[k]) as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(sum / classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub standard_accuracy: f64,
    pub standard_f1: f64,
    pub refined_accuracy: f64,
    pub refined_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvalReport {
    pub layers: Vec<LayerMetrics>,
    pub mean_standard_accuracy: f64,
    pub mean_standard_f1: f64,
    pub mean_refined_accuracy: f64,
    pub mean_refined_f1: f64,
    pub test_prompts: usize,
    pub templates: usize,
    /// Nearest-centroid label of each test prompt.
    pub true_labels: Vec<usize>,
}

impl ProbeEvalReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "layer,standard_accuracy,standard_f1,refined_accuracy,refined_f1")?;
        for m in &self.layers {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6}",
                m.layer, m.standard_accuracy, m.standard_f1, m.refined_accuracy, m.refined_f1
            )?;
        }
        Ok(())
    }
}

/// Template-averaged Δ of one test item: for every template pair, the
/// positive answer under the target-language phrasing minus the negative
/// answer under the baseline phrasing. `item.question` holds the text
/// substituted into the templates.
pub fn template_delta(
    params: &ModelParams,
    model: &SteeringModel,
    item: &PromptPair,
    templates: &TemplateSet,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0f64; model.layers * model.dim];
    for i in 0..templates.len() {
        let (q_pos, q_neg) = templates.render_pair(i, &item.question)?;
        let pos = answer_activations(params, &q_pos, &item.positive, model.site, model.reduction)?;
        let neg = answer_activations(params, &q_neg, &item.negative, model.site, model.reduction)?;
        for (l, (p, n)) in pos.iter().zip(&neg).enumerate() {
            for (j, (a, b)) in p.iter().zip(n).enumerate() {
                sum[l * model.dim + j] += (a - b) as f64;
            }
        }
    }
    let n = templates.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-layer accuracy and macro-F1 of standard and refined probes on
/// template-averaged test Δ, against each prompt's nearest training centroid.
pub fn evaluate_probes(
    params: &ModelParams,
    standard: &SteeringModel,
    refined: &SteeringModel,
    test: &[PromptPair],
    templates: &TemplateSet,
) -> Result<ProbeEvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidArgument("empty template set".into()));
    }
    if standard.classes != refined.classes
        || standard.layers != refined.layers
        || standard.dim != refined.dim
        || standard.centroids != refined.centroids
    {
        return Err(Error::InvalidArgument(
            "standard and refined models must share centroids".into(),
        ));
    }
    let deltas = test
        .par_iter()
        .map(|item| template_delta(params, standard, item, templates))
        .collect::<Result<Vec<_>>>()?;
    let centroids: Vec<Vec<f64>> = (0..standard.classes)
        .map(|k| standard.flat_centroid(k))
        .collect();
    let truth: Vec<usize> = deltas.iter().map(|d| nearest(&centroids, d).0).collect();

    let d = standard.dim;
    let mut layers = Vec::with_capacity(standard.layers);
    for l in 0..standard.layers {
        let xs: Vec<Vec<f32>> = deltas
            .iter()
            .map(|v| v[l * d..(l + 1) * d].iter().map(|&x| x as f32).collect())
            .collect();
        let ps: Vec<usize> = xs.iter().map(|x| standard.probes[l].predict(x)).collect();
        let pr: Vec<usize> = xs.iter().map(|x| refined.probes[l].predict(x)).collect();
        layers.push(LayerMetrics {
            layer: l,
            standard_accuracy: accuracy(&truth, &ps)?,
            standard_f1: macro_f1(&truth, &ps, standard.classes)?,
            refined_accuracy: accuracy(&truth, &pr)?,
            refined_f1: macro_f1(&truth, &pr, standard.classes)?,
        });
    }
    let mean = |f: fn(&LayerMetrics) -> f64| layers.iter().map(f).sum::<f64>() / layers.len() as f64;
    Ok(ProbeEvalReport {
        mean_standard_accuracy: mean(|m| m.standard_accuracy),
        mean_standard_f1: mean(|m| m.standard_f1),
        mean_refined_accuracy: mean(|m| m.refined_accuracy),
        mean_refined_f1: mean(|m| m.refined_f1),
        layers,
        test_prompts: test.len(),
        templates: templates.len(),
        true_labels: truth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub label: String,
    pub mean_seconds: f64,
    /// Population standard deviation over the measured runs.
    pub std_seconds: f64,
    pub runs: usize,
    pub warmup: usize,
    pub samples: Vec<f64>,
}

/// Runs `task` `warmup + runs` times sequentially and reports statistics
/// over the last `runs` executions.
pub fn timing_bench<F>(label: &str, runs: usize, warmup: usize, mut task: F) -> Result<TimingReport>
where
    F: FnMut() -> Result<()>,
{
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    for i in 0..warmup {
        task().map_err(|e| {
            Error::InvalidArgument(format!("{label}: warmup run {i} failed: {e}"))
        })?;
    }
    let mut samples = Vec::with_capacity(runs);
    for i in 0..runs {
        let start = Instant::now();
        task().map_err(|e| {
            Error::InvalidArgument(format!(
                "{label}: run {i} failed after {} completed runs: {e}",
                samples.len()
            ))
        })?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(TimingReport {
        label: label.to_owned(),
        mean_seconds: mean,
        std_seconds: var.sqrt(),
        runs,
        warmup,
        samples,
    })
}
