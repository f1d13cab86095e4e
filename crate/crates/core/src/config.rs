//! Model configuration shared by the fusion modules, the profiler and the harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fusion stage identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    F1,
    F2,
    F3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::F1, Stage::F2, Stage::F3];

    /// Parameter-name prefix, e.g. `f1`.
    pub fn key(self) -> &'static str {
        match self {
            Stage::F1 => "f1",
            Stage::F2 => "f2",
            Stage::F3 => "f3",
        }
    }

    /// Backbone downsampling ratio relative to the input image.
    pub fn stride(self) -> usize {
        match self {
            Stage::F1 => 8,
            Stage::F2 => 16,
            Stage::F3 => 32,
        }
    }

    /// Channel multiple of `D`.
    pub fn channel_mult(self) -> usize {
        match self {
            Stage::F1 => 4,
            Stage::F2 => 8,
            Stage::F3 => 16,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::F1 => "F1",
            Stage::F2 => "F2",
            Stage::F3 => "F3",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(Stage::F1),
            "F2" => Ok(Stage::F2),
            "F3" => Ok(Stage::F3),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Selective-scan block hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    pub state_size: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_size: 16,
            expand: 2,
            conv_kernel: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_size == 0 || self.expand == 0 || self.conv_kernel == 0 {
            return Err(Error::Config("ssm sizes must be positive".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!(
                "need 0 < dt_min <= dt_max, got {} / {}",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// One fusion stage: feature-map geometry plus its multi-head patching layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_sizes: Vec<usize>,
    /// Mamba layers per head.
    pub layers: usize,
}

impl StageConfig {
    pub fn heads(&self) -> usize {
        self.patch_sizes.len()
    }

    /// Model width of every head, `C / K`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads()
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.stage;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!("{name}: dimensions must be positive")));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config(format!("{name}: at least one patch size required")));
        }
        if self.layers == 0 {
            return Err(Error::Config(format!("{name}: layers must be >= 1")));
        }
        if !self.channels.is_multiple_of(self.heads()) {
            return Err(Error::Config(format!(
                "{name}: channels {} not divisible by {} heads",
                self.channels,
                self.heads()
            )));
        }
        for &s in &self.patch_sizes {
            if !s.is_power_of_two() || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "{name}: patch size {s} must be a power of two dividing {}x{}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

/// Complete fuser configuration: one entry per fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub ssm: SsmConfig,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no fusion stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if self.stages[..i].iter().any(|o| o.stage == s.stage) {
                return Err(Error::Config(format!("duplicate stage {}", s.stage)));
            }
        }
        self.ssm.validate()
    }

    /// Three-stage pyramid for an `image x image` input with channel factor `d`,
    /// `heads_f1` patch sizes `1, 2, 4, ...` on F1 and none on F2/F3.
    pub fn pyramid(image: usize, d: usize, heads_f1: usize, layers: usize) -> Self {
        let stages = Stage::ALL
            .iter()
            .map(|&stage| {
                let side = image / stage.stride();
                let patch_sizes = if stage == Stage::F1 {
                    (0..heads_f1).map(|k| 1usize << k).collect()
                } else {
                    vec![1]
                };
                StageConfig {
                    stage,
                    height: side,
                    width: side,
                    channels: stage.channel_mult() * d,
                    patch_sizes,
                    layers,
                }
            })
            .collect();
        Self {
            stages,
            ssm: SsmConfig::default(),
        }
    }

    /// Stage layout of the published configuration: 640x640 input, `D = 64`,
    /// `K = (4, 1, 1)`, 8 layers per head.
    pub fn published() -> Self {
        Self::pyramid(640, 64, 4, 8)
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Short stable digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
