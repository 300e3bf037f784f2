//! Clustered activation steering with per-layer probes.
//!
//! Pipeline: [`diff_vectors`] builds per-prompt style differences, [`kmeans`]
//! groups them into steering centroids, [`train_probes`] fits one classifier
//! per layer ([`SteeringModel::fit`] does both), [`refine`] retrains the
//! probes on steered activations with the base model frozen, and
//! [`steer_generate`] injects probe-selected centroids while sampling.

mod diffs;
mod inject;
mod kmeans;
mod model;
mod pairs;
mod probe;
mod refine;

pub use diffs::{
    answer_activations, diff_vectors, extract_pair_activations, layer_norm_profile, pair_tokens,
    DiffSet, Reduction, DIFFSET_MAGIC, DIFFSET_VERSION,
};
pub(crate) use diffs::{csv_field, subtract_layers};
pub use inject::{alpha_sweep, steer_generate, steer_hooks, AlphaRow, Selection, Steerer, SweepSettings};
pub use kmeans::{kmeans, nearest, KMeansOptions, KMeansResult};
pub use model::{FitOptions, SteeringModel, STEERING_MAGIC, STEERING_VERSION};
pub use pairs::PromptPair;
pub use probe::{
    fit_probe, probe_ce_gradient, probe_ce_loss, train_probes, Probe, ProbeState,
    ProbeTrainOptions,
};
pub use refine::{refine, RefineConfig, RefineReport};
