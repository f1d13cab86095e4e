//! Parameter, FLOP and latency accounting per fusion stage.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs, every elementwise add,
//! multiply or nonlinearity is 1 FLOP per output element, layer norm is 7 per
//! element and pure data movement (reshape, permute, gather, concat, slice) is
//! free. One frame pair is counted with the carry token prepended, which is the
//! shape every streamed frame runs at.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{output_shape, Backend, Eager, Op, ParamStore};
use crate::config::{FusionConfig, SsmConfig, StageConfig};
use crate::error::{Error, Result};
use crate::mhhpa::mhhpa_forward;
use crate::ssm::uniform_tensor;
use crate::temporal::{fuse_next, init_stream, FeaturePair, FusionModel};
use crate::tensor::{Element, Tensor};

/// Reference totals of the published model, for side-by-side printing only.
pub const PUBLISHED_PARAMS_M: f64 = 22.52;
pub const PUBLISHED_GFLOPS: f64 = 5.43;

pub const FLOP_CONVENTION: &str = "MAC = 2 FLOPs; elementwise add/mul/nonlinearity = 1 FLOP per element; \
layer norm = 7 FLOPs per element; reshape/permute/gather/concat/slice = 0; one frame pair with carry token";

/// FLOPs of one op application given its input shapes.
pub fn op_flops(op: &Op, shapes: &[&[usize]]) -> Result<u64> {
    let out = output_shape(op, shapes)?;
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    let n_out = numel(&out);
    Ok(match op {
        Op::Add | Op::Sub | Op::Mul | Op::Scale(_) => n_out,
        Op::Silu | Op::Softplus | Op::Exp | Op::Sigmoid => n_out,
        Op::SmoothL1 { .. } => n_out,
        Op::MatMul => 2 * numel(shapes[0]) * shapes[1][1] as u64,
        Op::Linear => {
            let w = shapes[1];
            let rows = numel(shapes[0]) / w[0] as u64;
            let bias = if shapes.len() == 3 { rows * w[1] as u64 } else { 0 };
            2 * rows * (w[0] * w[1]) as u64 + bias
        }
        Op::CausalConv1d => 2 * n_out * shapes[1][1] as u64,
        Op::LayerNorm { .. } => 7 * n_out,
        Op::Sum | Op::Mean => numel(shapes[0]),
        Op::SelectiveScan => {
            let (l, e) = (shapes[0][0] as u64, shapes[0][1] as u64);
            let n = shapes[2][1] as u64;
            scan_flops(l, e, n)
        }
        Op::Concat { .. } | Op::Slice { .. } | Op::Reshape { .. } | Op::Transpose { .. } | Op::Gather { .. } => 0,
    })
}

/// Discretize, update and read out every `(token, channel, state)` triple,
/// plus materializing `A` from its log.
fn scan_flops(l: u64, e: u64, n: u64) -> u64 {
    8 * l * e * n + e * n
}

fn linear(rows: u64, fan_in: u64, fan_out: u64, bias: bool) -> u64 {
    2 * rows * fan_in * fan_out + if bias { rows * fan_out } else { 0 }
}

/// Trainable scalars of one Mamba block at width `d`.
pub fn block_params(d: usize, ssm: &SsmConfig) -> u64 {
    let (d, e, n, k) = (d as u64, (ssm.expand * d) as u64, ssm.state_size as u64, ssm.conv_kernel as u64);
    let norm = 2 * d;
    let in_gate = 2 * (d * e + e);
    let conv = e * k;
    let ssm_p = e * n + (e * n + n) + e * e + e + e * n;
    let out = e * d + d;
    norm + in_gate + conv + ssm_p + out
}

/// FLOPs of one Mamba block over `l` tokens at width `d`.
pub fn block_flops(l: usize, d: usize, ssm: &SsmConfig) -> u64 {
    let (l, d, e, n, k) = (
        l as u64,
        d as u64,
        (ssm.expand * d) as u64,
        ssm.state_size as u64,
        ssm.conv_kernel as u64,
    );
    let norm = 7 * l * d;
    let branch = linear(l, d, e, true) + 2 * l * e * k + l * e;
    let gate = linear(l, d, e, true) + l * e;
    let delta = linear(l, e, e, true) + l * e;
    let b = linear(l, e, n, true);
    let scan = scan_flops(l, e, n);
    let out = l * e + linear(l, e, d, true) + l * d;
    norm + branch + gate + delta + b + scan + out
}

pub fn stage_params(s: &StageConfig, ssm: &SsmConfig) -> u64 {
    let (hw, c) = ((s.height * s.width) as u64, s.channels as u64);
    let d = s.head_dim() as u64;
    let emb = hw * c + 2 * c;
    let heads: u64 = s
        .patch_sizes
        .iter()
        .map(|&p| {
            let cs = c * (p * p) as u64;
            cs * d + s.layers as u64 * block_params(s.head_dim(), ssm) + d * cs + cs
        })
        .sum();
    let agg = s.heads() as u64 * c * c + c;
    emb + heads + agg
}

pub fn stage_flops(s: &StageConfig, ssm: &SsmConfig) -> u64 {
    let (hw, c) = ((s.height * s.width) as u64, s.channels as u64);
    let d = s.head_dim() as u64;
    let emb = 4 * hw * c;
    let heads: u64 = s
        .patch_sizes
        .iter()
        .map(|&p| {
            let cs = c * (p * p) as u64;
            let tokens = 2 * hw / (p * p) as u64;
            let proj = linear(tokens, cs, d, false);
            let stack = s.layers as u64 * block_flops(tokens as usize + 1, s.head_dim(), ssm);
            let out = linear(tokens, d, cs, true);
            let residual = 2 * hw * c;
            proj + stack + out + residual
        })
        .sum();
    let agg = 2 * (linear(hw, s.heads() as u64 * c, c, true) + hw * c);
    emb + heads + agg
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let pick = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Self {
            median_ms: pick(0.5),
            p95_ms: pick(0.95),
            reps: ms.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: String,
    pub params: u64,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub threads: usize,
}

impl Machine {
    pub fn current(threads: usize) -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub config_hash: String,
    pub flop_convention: String,
    pub stages: Vec<StageProfile>,
    pub total_params: u64,
    pub total_flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_latency: Option<LatencyStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub machine: Option<Machine>,
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub params_m: f64,
    pub gflops: f64,
    pub note: String,
}

impl Default for Reference {
    fn default() -> Self {
        Self {
            params_m: PUBLISHED_PARAMS_M,
            gflops: PUBLISHED_GFLOPS,
            note: "published GPU figures; SSM internals and counting convention differ, so the comparison is informational"
                .into(),
        }
    }
}

/// Closed-form counts for every stage.
pub fn count(config: &FusionConfig) -> Result<ProfileReport> {
    config.validate()?;
    let stages: Vec<StageProfile> = config
        .stages
        .iter()
        .map(|s| StageProfile {
            stage: s.stage.to_string(),
            params: stage_params(s, &config.ssm),
            flops: stage_flops(s, &config.ssm),
            latency: None,
        })
        .collect();
    Ok(ProfileReport {
        config_hash: config.hash(),
        flop_convention: FLOP_CONVENTION.into(),
        total_params: stages.iter().map(|s| s.params).sum(),
        total_flops: stages.iter().map(|s| s.flops).sum(),
        stages,
        total_latency: None,
        machine: None,
        reference: Reference::default(),
    })
}

pub fn count_params(config: &FusionConfig) -> Result<Vec<u64>> {
    Ok(count(config)?.stages.iter().map(|s| s.params).collect())
}

pub fn count_flops(config: &FusionConfig) -> Result<Vec<u64>> {
    Ok(count(config)?.stages.iter().map(|s| s.flops).collect())
}

/// Eager execution that also tallies FLOPs op by op.
pub struct Counting<'p, E: Element = f32> {
    inner: Eager<'p, E>,
    flops: u64,
}

impl<'p, E: Element> Counting<'p, E> {
    pub fn new(params: &'p ParamStore<E>) -> Self {
        Self {
            inner: Eager::new(params),
            flops: 0,
        }
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }
}

impl<E: Element> Backend for Counting<'_, E> {
    type Elem = E;
    type Value = Tensor<E>;

    fn param(&mut self, name: &str) -> Result<Tensor<E>> {
        self.inner.param(name)
    }

    fn constant(&mut self, t: Tensor<E>) -> Tensor<E> {
        t
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        self.flops += op_flops(&op, &shapes)?;
        self.inner.apply(op, inputs)
    }

    fn value<'a>(&'a self, v: &'a Tensor<E>) -> &'a Tensor<E> {
        v
    }
}

fn random_pyramid(config: &FusionConfig, rng: &mut ChaCha8Rng) -> Vec<FeaturePair> {
    config
        .stages
        .iter()
        .map(|s| FeaturePair {
            stage: s.stage,
            rgb: uniform_tensor(rng, vec![s.height, s.width, s.channels], 1.0),
            thermal: uniform_tensor(rng, vec![s.height, s.width, s.channels], 1.0),
        })
        .collect()
}

fn time_ms(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples))
}

/// Counts plus wall-clock timings of every stage and of a full streamed frame.
pub fn bench_latency(model: &FusionModel, reps: usize, warmup: usize, seed: u64) -> Result<ProfileReport> {
    if reps < 10 || warmup < 3 {
        return Err(Error::invalid(
            "bench_latency",
            format!("need reps >= 10 and warmup >= 3, got {reps} / {warmup}"),
        ));
    }
    let mut report = count(model.config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pyramid = random_pyramid(model.config(), &mut rng);
    let state = init_stream(model);
    for (i, plan) in model.plans().iter().enumerate() {
        let pair = &pyramid[i];
        let carries = &state.carries()[i];
        report.stages[i].latency = Some(time_ms(reps, warmup, || {
            let mut e = Eager::new(model.params());
            mhhpa_forward(&mut e, plan, &pair.rgb, &pair.thermal, Some(carries)).map(|_| ())
        })?);
    }
    report.total_latency = Some(time_ms(reps, warmup, || fuse_next(model, &state, &pyramid).map(|_| ()))?);
    report.machine = Some(Machine::current(1));
    Ok(report)
}

/// Aligned text table: stage, params (M), GFLOPs, latency.
pub fn render_table(r: &ProfileReport) -> String {
    let mut s = String::new();
    let lat = |l: &Option<LatencyStats>| match l {
        Some(l) => format!("{:>10.2} {:>10.2}", l.median_ms, l.p95_ms),
        None => format!("{:>10} {:>10}", "-", "-"),
    };
    let _ = writeln!(s, "{:<8} {:>12} {:>10} {:>10} {:>10}", "stage", "params(M)", "GFLOPs", "med(ms)", "p95(ms)");
    for st in &r.stages {
        let _ = writeln!(
            s,
            "{:<8} {:>12.3} {:>10.3} {}",
            st.stage,
            st.params as f64 / 1e6,
            st.flops as f64 / 1e9,
            lat(&st.latency)
        );
    }
    let _ = writeln!(
        s,
        "{:<8} {:>12.3} {:>10.3} {}",
        "total",
        r.total_params as f64 / 1e6,
        r.total_flops as f64 / 1e9,
        lat(&r.total_latency)
    );
    let _ = writeln!(
        s,
        "{:<8} {:>12.2} {:>10.2}   (published; informational)",
        "published", r.reference.params_m, r.reference.gflops
    );
    let _ = writeln!(s, "flops: {}", r.flop_convention);
    if let Some(m) = &r.machine {
        let _ = writeln!(
            s,
            "machine: {} {} ({} logical cpus, {} thread); CPU timings are not comparable to GPU figures",
            m.os, m.arch, m.logical_cpus, m.threads
        );
    }
    s
}
