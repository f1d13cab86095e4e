//! Synthetic end-to-end detection harness.

pub mod data;
pub mod detector;
pub mod train;

pub use data::{generate, Clip, Frame, SyntheticSpec};
pub use detector::{Detector, DetectorConfig, Fuser, ModelConfig};
pub use train::{evaluate_checkpoint, train, Checkpoint, EvalConfig, RunConfig, SplitReport, TrainConfig, TrainReport};
