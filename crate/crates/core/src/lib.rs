//! RGB-D salient object detection: a two-stream encoder with attention-based
//! cross-modal fusion, coarse-to-fine refinement, the standard saliency
//! metric suite, and a training/evaluation harness.

pub mod abf;
pub mod ablate;
pub mod backbone;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod fine;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predict;
pub mod resize;
pub mod synth;
pub mod train;

pub use config::{Ablation, LambdaSchedule, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{Msirn, SaliencyPrediction};
