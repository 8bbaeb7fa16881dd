//! Synthetic data, the training loop, metrics and experiment recipes.

pub mod ablation;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod train;
