//! Audio-visual deepfake detection with adaptive-temperature contrastive
//! learning, cluster-guided fusion, multi-scale large-kernel attention and
//! Pareto gradient balancing, at desk scale.

pub mod audio;
pub mod classify;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod macl;
pub mod mslka;
pub mod nn;
pub mod numerics;
pub mod pareto;

pub use error::{Error, Result};
