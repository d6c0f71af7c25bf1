//! Fixed operation set with hand-written reverse passes.
//!
//! Every layer exposes `forward` (pure, `&self`) and `backward` (accumulates
//! into its own [`Parameter`](crate::tensor::Parameter) gradients and returns
//! the input gradient). Caches are explicit values owned by the caller.

mod activation;
mod attention;
mod fourier;
pub mod gradcheck;
mod linear;
mod mha;
mod mlp;
mod norm;
pub mod optim;

pub use activation::{silu, silu_backward};
pub use attention::{attention_core, attention_core_backward, attention_core_with_probs};
pub use fourier::{fourier_features, fourier_features_backward};
pub use gradcheck::{grad_check, grad_check_report, Differentiable, FnOp};
pub use linear::{linear, linear_backward, Linear};
pub use mha::{AttnGroup, MhaCache, MultiHeadAttention};
pub use mlp::{Mlp, MlpCache};
pub use norm::{layer_norm, layer_norm_backward, LayerNorm, LnCache};
pub use optim::AdamW;
