//! Llama-style decoder-only transformer with optional HDPL projections.

pub mod accounting;
pub mod config;
pub mod layers;
pub mod model;

pub use accounting::{count_model_params, size_mb, tensor_manifest, ParamReport, TensorSpec};
pub use config::{ModelConfig, Mode, Projection};
pub use layers::{apply_rope, causal_attention, causal_mask, rmsnorm};
pub use model::{
    tap_latents, ForwardOptions, ForwardResult, LatentOverride, LatentRecord, ProjectionLayer, TransformerModel,
};
