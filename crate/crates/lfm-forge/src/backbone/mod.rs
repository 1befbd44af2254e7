//! Decoder stack: gated short convolution layers interleaved with GQA,
//! SwiGLU / MoE feed-forward, prefill, and constant-state streaming decode.

pub mod blocks;
pub mod config;
pub mod model;

pub use blocks::{
    gated_conv_block, gqa_block, moe_ffn, update_router_bias, AttnBlockWeights, AttnGeom,
    AttnState, ConvBlockWeights, ConvState, MlpWeights, MoeWeights, NORM_EPS,
};
pub use config::{Init, ModelConfig, MoEConfig};
pub use model::{build_model, sample_token, Model, SessionState};
