//! Input builders shared by the criterion benches.

use mambast::ssm::SsmParams;
use mambast::temporal::FeaturePair;
use mambast::{FusionConfig, SsmConfig, Tensor};

/// Deterministic values in `[-1, 1)` from a simple LCG, so benches need no RNG crate.
pub fn filled(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data: Vec<f32> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Scan parameters with `-A` in `1..=n` and inputs of length `l`.
pub fn scan_inputs(c: usize, n: usize, l: usize) -> (SsmParams<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let a_log = Tensor::new(vec![c, n], (0..c).flat_map(|_| (1..=n).map(|k| (k as f32).ln())).collect::<Vec<_>>())
        .expect("shape");
    let p = SsmParams::new(a_log, filled(vec![c, n], 1)).expect("params");
    let delta = filled(vec![l, c], 2).map(|v| 0.01 + 0.05 * (v + 1.0));
    (p, filled(vec![l, c], 3), delta, filled(vec![l, n], 4))
}

/// A small three-stage pyramid, as used by the synthetic harness.
pub fn small_config() -> FusionConfig {
    let mut cfg = FusionConfig::pyramid(64, 2, 2, 1);
    cfg.ssm = SsmConfig {
        state_size: 4,
        ..SsmConfig::default()
    };
    cfg
}

pub fn pyramid(cfg: &FusionConfig, seed: u64) -> Vec<FeaturePair> {
    cfg.stages
        .iter()
        .enumerate()
        .map(|(i, s)| FeaturePair {
            stage: s.stage,
            rgb: filled(vec![s.height, s.width, s.channels], seed + 2 * i as u64),
            thermal: filled(vec![s.height, s.width, s.channels], seed + 2 * i as u64 + 1),
        })
        .collect()
}
