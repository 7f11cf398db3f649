//! Scored transformer building blocks.

pub mod attention;
pub mod backbone;
pub mod block;
pub mod embed;
pub mod mlp;
pub mod norm;
pub mod window;

pub use attention::{
    msa_forward, msa_forward_batch, scaled_dot_attention, wmsa_forward, AttentionParams, AttentionVars,
};
pub use backbone::{forward_bound, Backbone, BackboneConfig, BackboneOutput, BackboneVars, MergeParams, Stage};
pub use block::{block_forward, BlockParams, BlockVars};
pub use embed::{patch_embed, patch_merge};
pub use mlp::{mlp_forward, MlpParams, MlpVars};
pub use norm::{NormParams, NormVars, LAYER_NORM_EPS};
pub use window::{window_partition, window_reverse, WindowSpec, MASK_VALUE};
