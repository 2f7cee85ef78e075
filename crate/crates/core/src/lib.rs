//! Adaptive heatmap target precision for landmark localisation: a small
//! tensor kernel, a heatmap encoder-decoder, per-landmark REINFORCE
//! controllers that tune each Gaussian target's σ during training, and the
//! synthetic benchmark used to evaluate them.

pub mod error;
pub mod numkernel;

pub use error::{Error, Result};
mod checkpoint;
pub mod controller;
pub mod heatmap;
pub mod laoml;
pub mod learner;
pub mod metrics;
pub mod rundir;
pub mod surrogate;
pub mod synthdata;

pub use heatmap::{LandmarkSet, SigmaBounds, SigmaVector};
pub use laoml::{run_training, Mode, RunArtifacts, TrainConfig};
pub use learner::{Architecture, Decode, Network, Precision};

/// Double-precision aliases; the run loop and acceptance checks use these.
pub type Tensor = numkernel::Tensor<f64>;
pub type HeatmapStack = heatmap::HeatmapStack<f64>;
pub type UNet = learner::UNet<f64>;

/// Single-precision aliases for faster desk runs.
pub type Tensor32 = numkernel::Tensor<f32>;
pub type HeatmapStack32 = heatmap::HeatmapStack<f32>;
pub type UNet32 = learner::UNet<f32>;
