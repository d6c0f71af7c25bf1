//! Rectified-flow training, guided Euler sampling and clip extension.
//!
//! Noise level `s` runs from 0 (clean) to 1 (pure noise); the interpolant is
//! `x_s = (1 − s)·data + s·noise` and the velocity target is `data − noise`.

mod guidance;
mod sample;
mod train;

pub use guidance::{cfg_velocity, guided_pair, guided_velocity, GuidanceMode, GuidanceSpec, VelocityField, DEFAULT_SCALE};
pub use sample::{euler_sample, euler_steps, extend_video, initial_noise, noise_grid, stitch, SamplerRun};
pub use train::{draw_noise, masked_mse, rf_example, rf_loss, rf_training_step, RfExample, StepOptions, TrainItem};
