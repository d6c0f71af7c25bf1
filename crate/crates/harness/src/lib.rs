//! Toy driving world, dataset files, training and sampling drivers, metrics
//! and benchmarks around `dive-core`.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod export;
pub mod metrics;
pub mod train;
pub mod world;
