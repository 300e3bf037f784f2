use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "steerlab",
    version,
    about = "Neuron attribution and activation steering on a toy transformer",
    args_override_self = true,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic bilingual corpus and its train/test pair split.
    Synth(SynthArgs),
    /// Train the toy model on tokenized sequences.
    TrainToy(TrainArgs),
    /// Rank MLP neurons by their static association with a token.
    Scan(ScanArgs),
    /// Language-preference benchmark with one neuron amplified.
    Perturb(PerturbArgs),
    /// Per-layer activation differences between paired answers.
    ExtractDiffs(ExtractArgs),
    /// K-means over flattened difference vectors.
    Cluster(ClusterArgs),
    /// Fit per-layer probes to cluster labels and write a steering model.
    TrainProbes(ProbeArgs),
    /// Gradient-refine steering probes under injection.
    Refine(RefineArgs),
    /// Generate with probe-selected centroid injection.
    Steer(SteerArgs),
    /// Target-token rate as a function of the injection strength.
    SweepAlpha(SweepArgs),
    /// Language-preference benchmark, optionally steered.
    BenchPref(BenchPrefArgs),
    /// Standard vs refined probe accuracy on template-averaged test differences.
    EvalProbes(EvalProbesArgs),
    /// Wall-clock cost of vanilla vs steered decoding.
    BenchTime(BenchTimeArgs),
    /// Difference vectors from recorded activation traces.
    TraceDiffs(TraceDiffsArgs),
    /// Run synth through steer from a JSON run configuration.
    Pipeline(PipelineArgs),
    /// Re-run a subcommand from its manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainToy(_) => "train-toy",
            Command::Scan(_) => "scan",
            Command::Perturb(_) => "perturb",
            Command::ExtractDiffs(_) => "extract-diffs",
            Command::Cluster(_) => "cluster",
            Command::TrainProbes(_) => "train-probes",
            Command::Refine(_) => "refine",
            Command::Steer(_) => "steer",
            Command::SweepAlpha(_) => "sweep-alpha",
            Command::BenchPref(_) => "bench-pref",
            Command::EvalProbes(_) => "eval-probes",
            Command::BenchTime(_) => "bench-time",
            Command::TraceDiffs(_) => "trace-diffs",
            Command::Pipeline(_) => "pipeline",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub problems: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fraction of pairs assigned to the training split.
    #[arg(long, default_value_t = 0.7)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub split_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON-lines file of token-id arrays.
    #[arg(long)]
    pub sequences: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Batch-sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 7)]
    pub model_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Token name (cpp, python, java, julia, bos, eos), a single character or an id.
    #[arg(long)]
    pub token: String,
    #[arg(long, default_value_t = steerlab::attribution::DEFAULT_TOP_K)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines problem file; prompts are the untagged descriptions.
    #[arg(long)]
    pub problems: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub neuron: usize,
    /// `add` or `set`.
    #[arg(long, default_value = "add")]
    pub mode: String,
    /// Comma-separated amounts; each gets its own benchmark row.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,20")]
    pub amounts: Vec<f32>,
    #[arg(long, default_value_t = 25)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines prompt pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value = "post_mlp")]
    pub site: String,
    /// `final` or `mean`.
    #[arg(long, default_value = "mean")]
    pub reduction: String,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub diffs: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub diffs: PathBuf,
    /// Output of `cluster`.
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct RefineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steering: PathBuf,
    /// Training pairs, in the order used to fit the steering model.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steering: PathBuf,
    /// Prompt pairs whose questions are used as prompts.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Use at most this many prompts.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Overrides the steering model's stored strength.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub max_new_tokens: usize,
    /// `token` or `prompt`.
    #[arg(long, default_value = "token")]
    pub selection: String,
    /// Comma-separated layers to steer; all layers by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steering: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1)]
    pub max_new_tokens: usize,
    /// Token counted as a hit when generated first.
    #[arg(long, default_value = "cpp")]
    pub target: String,
    #[arg(long, default_value = "token")]
    pub selection: String,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchPrefArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub problems: PathBuf,
    /// Steer generation with this model.
    #[arg(long)]
    pub steering: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 25)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub max_new_tokens: usize,
    #[arg(long, default_value = "token")]
    pub selection: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalProbesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub standard: PathBuf,
    #[arg(long)]
    pub refined: PathBuf,
    /// Test pairs; each question is the description substituted into the templates.
    #[arg(long)]
    pub pairs: PathBuf,
    /// `toy` or `bundled`; ignored when template files are given.
    #[arg(long, default_value = "toy")]
    pub templates: String,
    #[arg(long, requires = "python_templates")]
    pub cpp_templates: Option<PathBuf>,
    #[arg(long, requires = "cpp_templates")]
    pub python_templates: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchTimeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steering: PathBuf,
    #[arg(long, default_value = "sort array 12\n")]
    pub prompt: String,
    #[arg(long, default_value_t = 25)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
    #[arg(long, default_value = "token")]
    pub selection: String,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceDiffsArgs {
    /// Directory of `.atrc` traces.
    #[arg(long, required_unless_present = "model")]
    pub traces: Option<PathBuf>,
    /// Record traces with this model first (requires `--pairs`).
    #[arg(long, requires = "pairs")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    pub model_id: String,
    #[arg(long, default_value = "post_mlp")]
    pub site: String,
    #[arg(long, default_value = "mean")]
    pub reduction: String,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
