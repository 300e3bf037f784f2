use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::args::PipelineArgs;
use crate::manifest::{Manifest, RunContext};
use crate::{dispatch_with, CliError, CliResult, EXIT_OK};

/// Settings for a full synth-to-steer run. Missing JSON fields take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problems: usize,
    pub synth_seed: u64,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub train_steps: usize,
    pub train_lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub train_seed: u64,
    pub model_seed: u64,
    pub site: String,
    pub reduction: String,
    pub classes: usize,
    pub kmeans_seed: u64,
    pub alpha: f64,
    pub probe_lr: f64,
    pub probe_max_iter: usize,
    pub epochs: usize,
    pub refine_lr: f64,
    pub steer_limit: usize,
    pub steer_reps: usize,
    pub steer_temperature: f64,
    pub steer_max_new_tokens: usize,
    pub steer_seed: u64,
    pub selection: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problems: 500,
            synth_seed: 1,
            split_ratio: 0.7,
            split_seed: 3,
            train_steps: 800,
            train_lr: 3e-3,
            batch_size: 16,
            warmup: 50,
            train_seed: 0,
            model_seed: 7,
            site: "post_mlp".into(),
            reduction: "mean".into(),
            classes: 2,
            kmeans_seed: 0,
            alpha: 1.0,
            probe_lr: 0.1,
            probe_max_iter: 10_000,
            epochs: 50,
            refine_lr: 1e-2,
            steer_limit: 50,
            steer_reps: 2,
            steer_temperature: 1.0,
            steer_max_new_tokens: 8,
            steer_seed: 0,
            selection: "token".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid run config {}: {e}", path.display())))
    }

    /// `(stage directory, argv)` for every stage, in execution order.
    pub fn stages(&self, out: &Path) -> Vec<(&'static str, Vec<String>)> {
        let p = |stage: &str, file: &str| out.join(stage).join(file).display().to_string();
        let s = |v: &dyn ToString| v.to_string();
        vec![
            (
                "synth",
                vec![
                    "synth".into(),
                    "--problems".into(),
                    s(&self.problems),
                    "--seed".into(),
                    s(&self.synth_seed),
                    "--split-ratio".into(),
                    s(&self.split_ratio),
                    "--split-seed".into(),
                    s(&self.split_seed),
                ],
            ),
            (
                "train-toy",
                vec![
                    "train-toy".into(),
                    "--sequences".into(),
                    p("synth", "sequences.jsonl"),
                    "--steps".into(),
                    s(&self.train_steps),
                    "--lr".into(),
                    s(&self.train_lr),
                    "--batch-size".into(),
                    s(&self.batch_size),
                    "--warmup".into(),
                    s(&self.warmup),
                    "--seed".into(),
                    s(&self.train_seed),
                    "--model-seed".into(),
                    s(&self.model_seed),
                ],
            ),
            (
                "extract-diffs",
                vec![
                    "extract-diffs".into(),
                    "--model".into(),
                    p("train-toy", "model.stlb"),
                    "--pairs".into(),
                    p("synth", "train_pairs.jsonl"),
                    "--site".into(),
                    self.site.clone(),
                    "--reduction".into(),
                    self.reduction.clone(),
                ],
            ),
            (
                "cluster",
                vec![
                    "cluster".into(),
                    "--diffs".into(),
                    p("extract-diffs", "diffs.stdf"),
                    "--classes".into(),
                    s(&self.classes),
                    "--seed".into(),
                    s(&self.kmeans_seed),
                ],
            ),
            (
                "train-probes",
                vec![
                    "train-probes".into(),
                    "--diffs".into(),
                    p("extract-diffs", "diffs.stdf"),
                    "--clusters".into(),
                    p("cluster", "clusters.json"),
                    "--alpha".into(),
                    s(&self.alpha),
                    "--lr".into(),
                    s(&self.probe_lr),
                    "--max-iter".into(),
                    s(&self.probe_max_iter),
                ],
            ),
            (
                "refine",
                vec![
                    "refine".into(),
                    "--model".into(),
                    p("train-toy", "model.stlb"),
                    "--steering".into(),
                    p("train-probes", "steering.strm"),
                    "--pairs".into(),
                    p("synth", "train_pairs.jsonl"),
                    "--epochs".into(),
                    s(&self.epochs),
                    "--lr".into(),
                    s(&self.refine_lr),
                    "--alpha".into(),
                    s(&self.alpha),
                ],
            ),
            (
                "steer",
                vec![
                    "steer".into(),
                    "--model".into(),
                    p("train-toy", "model.stlb"),
                    "--steering".into(),
                    p("refine", "refined.strm"),
                    "--pairs".into(),
                    p("synth", "test_pairs.jsonl"),
                    "--limit".into(),
                    s(&self.steer_limit),
                    "--reps".into(),
                    s(&self.steer_reps),
                    "--temperature".into(),
                    s(&self.steer_temperature),
                    "--max-new-tokens".into(),
                    s(&self.steer_max_new_tokens),
                    "--selection".into(),
                    self.selection.clone(),
                    "--seed".into(),
                    s(&self.steer_seed),
                ],
            ),
        ]
    }
}

/// Runs every stage into `<out>/<stage>/` and records each stage's outputs
/// as `<stage>/<file>` in the pipeline manifest.
pub(crate) fn run(ctx: &mut RunContext, a: &PipelineArgs, threads: Option<usize>) -> CliResult<serde_json::Value> {
    ctx.input_file(&a.config)?;
    let cfg = RunConfig::load(&a.config)?;
    let out = ctx.out.clone();
    for (stage, args) in cfg.stages(&out) {
        let mut argv = vec!["steerlab".to_owned()];
        argv.extend(args);
        argv.extend(["--out".to_owned(), out.join(stage).display().to_string()]);
        if let Some(t) = threads {
            argv.extend(["--threads".to_owned(), t.to_string()]);
        }
        let code = dispatch_with(argv, ctx.seed_override());
        if code != EXIT_OK {
            let err = format!("pipeline stage {stage} exited with {code}");
            return Err(if code == crate::EXIT_USAGE {
                CliError::Usage(err)
            } else {
                CliError::Runtime(anyhow::anyhow!(err))
            });
        }
        let m = Manifest::load(&out.join(stage).join(Manifest::file_name(stage)))?;
        for name in m.outputs.keys() {
            ctx.record(&format!("{stage}/{name}"))?;
        }
    }
    Ok(serde_json::to_value(&cfg)?)
}
