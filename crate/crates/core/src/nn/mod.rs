//! Parameters, optimizer and transformer building blocks.

pub mod adam;
pub mod layers;
pub mod params;
pub(crate) mod wire;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    attention_apply, cross_entropy, gated_prefix_attention, init_block, init_linear, linear, linear_apply, mse_loss,
    transformer_block_apply, AttentionMode,
};
pub use params::{Grads, Param, ParamSet};
