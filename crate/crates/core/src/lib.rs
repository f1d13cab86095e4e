//! Cross-spectral spatial-temporal fusion built on selective state-space scans.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors, a small op set with
//!   reverse-mode gradients, and a finite-difference checker.
//! - [`ssm`]: the selective scan and gated Mamba blocks.
//! - [`ocf`]: order-aware interleaving of RGB/thermal patches into one sequence.
//! - [`mhhpa`]: multi-head hierarchical patching and aggregation for one stage.
//! - [`temporal`]: recurrent carry tokens across frames.
//! - [`metrics`]: miss rate / FPPI, log-average miss rate and recall.
//! - [`profiler`]: analytic parameter and FLOP counts, latency benchmarks.
//! - [`harness`]: synthetic data, toy detector, training and evaluation.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mhhpa;
pub mod ocf;
pub mod profiler;
pub mod selfcheck;
pub mod ssm;
pub mod temporal;
pub mod tensor;

pub use autodiff::{Backend, Eager, Graph, Op, ParamStore, Var};
pub use config::{FusionConfig, SsmConfig, Stage, StageConfig};
pub use error::{Error, Result};
pub use temporal::{FeaturePair, FusionModel, StreamState};
pub use tensor::{Element, Tensor};
