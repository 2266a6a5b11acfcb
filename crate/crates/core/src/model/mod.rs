//! The encoder-decoder saliency network and its configuration.

pub mod config;
pub mod network;
pub mod params;

pub use config::{parse_preset, ModelConfig, ModuleKind, PRESETS};
pub use network::{
    image_shape, AttentionValues, ForwardOutput, ModuleAttention, ParamVars, Prediction,
    SaliencyModel,
};
pub use params::{group_of, Group};
