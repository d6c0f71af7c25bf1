//! The denoiser: view-inflated spatial, temporal and cross attention blocks
//! with a SketchFormer side branch.

mod block;
pub mod checkpoint;
mod config;
mod model;
mod ops;
mod tokens;

pub use block::{Block, Groups, SketchCell};
pub use config::BackboneConfig;
pub use model::{Backprop, Denoiser, ForwardCache};
pub use ops::{
    cross_attention_block, cross_attention_block_backward, spatial_attention, temporal_attention, temporal_attention_backward,
    view_inflated_spatial_attention, StageCache,
};
pub use tokens::{patchify, positional_codes, unpatchify, TokenLayout};

#[cfg(test)]
mod tests;
