//! Miniature decoder-only transformer with gated MLP blocks.

mod config;
mod forward;
mod params;
mod sampling;
mod train;

pub use config::ModelConfig;
pub use forward::{
    capture, forward, forward_with, Edit, ForwardTrace, HookSet, Intervention, Logits, NoIntervention,
    SiteKind, TapSite,
};
pub use params::{init_params, LayerParams, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sampling::{
    generate, generate_with, next_token_distribution, sample_index, GenerationSettings,
};
pub use train::{loss_and_gradient, mean_loss, train_toy, Gradients, TrainOptions, TrainReport};
