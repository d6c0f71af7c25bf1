//! Multi-view, multi-condition rectified-flow video denoising.
//!
//! The crate is organised bottom-up: [`nn`] holds dense kernels with manual
//! reverse passes, [`conditions`] turns scene descriptions into tokens,
//! [`backbone`] is the denoiser, [`flow`] trains and samples it, [`mad`]
//! distills guidance into single-pass branches and [`rps`] samples
//! progressively from low to high resolution.

pub mod backbone;
pub mod checks;
pub mod conditions;
pub mod error;
pub mod flow;
pub mod latent;
pub mod mad;
pub mod nn;
pub mod rng;
pub mod rps;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use latent::{GridDims, LatentGrid};
pub use tensor::{Parameter, Params, Tensor};
