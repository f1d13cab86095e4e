//! Selective state-space scan and the gated Mamba block built on it.
//!
//! Per channel `c` and state index `n` the recurrence is
//!
//! ```text
//! A      = -exp(A_log[c, n])
//! Ā_t    = exp(Δ_t[c] · A)
//! B̄_t    = Δ_t[c] · B_t[n]
//! h_t    = Ā_t · h_{t-1} + B̄_t · x_t[c]
//! y_t[c] = Σ_n W_out[c, n] · h_t[c, n]
//! ```
//!
//! `Δ` and `B` are per-token projections of the input; `A` and `W_out` are
//! input-independent.

use rand::Rng;
use rand_distr::Uniform;

use crate::autodiff::{Backend, ParamStore};
use crate::config::SsmConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Zero-order hold for `A`, Euler rule for `B`.
pub fn discretize<E: Element>(a: E, b: E, delta: E) -> Result<(E, E)> {
    if !(delta > E::zero()) {
        return Err(Error::invalid("discretize", format!("delta must be positive, got {delta:?}")));
    }
    Ok(((delta * a).exp(), delta * b))
}

/// Hidden state `h`, `channels x state_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<E = f32> {
    pub channels: usize,
    pub state_size: usize,
    pub h: Vec<E>,
}

impl<E: Element> SsmState<E> {
    pub fn zeros(channels: usize, state_size: usize) -> Self {
        Self {
            channels,
            state_size,
            h: vec![E::zero(); channels * state_size],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|v| v.is_finite())
    }
}

/// Input-independent scan parameters.
#[derive(Clone, Debug)]
pub struct SsmParams<E = f32> {
    /// `[channels, state_size]`, stores `ln(-A)`.
    pub a_log: Tensor<E>,
    /// `[channels, state_size]`
    pub w_out: Tensor<E>,
}

/// One recurrence step in place; writes `y` (length `channels`).
#[inline]
#[allow(clippy::too_many_arguments)]
fn step_into<E: Element>(
    h: &mut [E],
    neg_a: &[E],
    w_out: &[E],
    x: &[E],
    delta: &[E],
    b: &[E],
    y: &mut [E],
    n: usize,
) -> Result<()> {
    for (c, yc) in y.iter_mut().enumerate() {
        let d = delta[c];
        if !(d > E::zero()) {
            return Err(Error::invalid("selective_scan", format!("delta must be positive, got {d:?}")));
        }
        let xc = x[c];
        let mut acc = E::zero();
        let row = c * n..(c + 1) * n;
        for ((hv, (&a, &w)), &bn) in h[row.clone()]
            .iter_mut()
            .zip(neg_a[row.clone()].iter().zip(&w_out[row]))
            .zip(b)
        {
            let a_bar = (d * a).exp();
            *hv = a_bar * *hv + d * bn * xc;
            acc = acc + w * *hv;
        }
        *yc = acc;
    }
    Ok(())
}

fn neg_exp<E: Element>(a_log: &[E]) -> Vec<E> {
    a_log.iter().map(|&v| -v.exp()).collect()
}

impl<E: Element> SsmParams<E> {
    pub fn new(a_log: Tensor<E>, w_out: Tensor<E>) -> Result<Self> {
        if a_log.rank() != 2 || a_log.shape() != w_out.shape() {
            return Err(Error::shape("ssm_params", a_log.shape(), w_out.shape()));
        }
        Ok(Self { a_log, w_out })
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    fn check_token(&self, x: &[E], delta: &[E], b: &[E], state: &SsmState<E>) -> Result<()> {
        let (c, n) = (self.channels(), self.state_size());
        if x.len() != c || delta.len() != c {
            return Err(Error::shape("scan_step", &[c], &[x.len(), delta.len()]));
        }
        if b.len() != n {
            return Err(Error::shape("scan_step", &[n], &[b.len()]));
        }
        if state.channels != c || state.state_size != n {
            return Err(Error::shape("scan_step", &[c, n], &[state.channels, state.state_size]));
        }
        Ok(())
    }

    /// Advances the state by one token `x_t` with its own `Δ_t` and `B_t`.
    pub fn scan_step(&self, x: &[E], delta: &[E], b: &[E], state: &SsmState<E>) -> Result<(Vec<E>, SsmState<E>)> {
        self.check_token(x, delta, b, state)?;
        let mut next = state.clone();
        let mut y = vec![E::zero(); self.channels()];
        let neg_a = neg_exp(self.a_log.data());
        step_into(&mut next.h, &neg_a, self.w_out.data(), x, delta, b, &mut y, self.state_size())?;
        Ok((y, next))
    }

    /// Runs the whole sequence `x [L, C]` with `delta [L, C]`, `b [L, N]`.
    pub fn scan_sequence(
        &self,
        x: &Tensor<E>,
        delta: &Tensor<E>,
        b: &Tensor<E>,
        state0: &SsmState<E>,
    ) -> Result<(Tensor<E>, SsmState<E>)> {
        let (c, n) = (self.channels(), self.state_size());
        if x.rank() != 2 || x.shape()[1] != c || delta.shape() != x.shape() {
            return Err(Error::shape("scan_sequence", x.shape(), delta.shape()));
        }
        let l = x.shape()[0];
        if b.shape() != [l, n] {
            return Err(Error::shape("scan_sequence", &[l, n], b.shape()));
        }
        self.check_token(&x.data()[..c], &delta.data()[..c], &b.data()[..n], state0)?;
        let neg_a = neg_exp(self.a_log.data());
        let mut state = state0.clone();
        let mut y = vec![E::zero(); l * c];
        for t in 0..l {
            step_into(
                &mut state.h,
                &neg_a,
                self.w_out.data(),
                &x.data()[t * c..(t + 1) * c],
                &delta.data()[t * c..(t + 1) * c],
                &b.data()[t * n..(t + 1) * n],
                &mut y[t * c..(t + 1) * c],
                n,
            )?;
        }
        Ok((Tensor::from_parts(vec![l, c], y), state))
    }
}

/// Zero-state scan over raw buffers; the kernel behind the `SelectiveScan` op.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<E: Element>(
    u: &[E],
    delta: &[E],
    a_log: &[E],
    b: &[E],
    w_out: &[E],
    l: usize,
    e: usize,
    n: usize,
) -> Result<Vec<E>> {
    let neg_a = neg_exp(a_log);
    let mut h = vec![E::zero(); e * n];
    let mut y = vec![E::zero(); l * e];
    for t in 0..l {
        step_into(
            &mut h,
            &neg_a,
            w_out,
            &u[t * e..(t + 1) * e],
            &delta[t * e..(t + 1) * e],
            &b[t * n..(t + 1) * n],
            &mut y[t * e..(t + 1) * e],
            n,
        )?;
    }
    Ok(y)
}

/// Gradients of the zero-state scan with respect to `(u, delta, a_log, b, w_out)`.
/// Hidden states are recomputed rather than saved by the forward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<E: Element>(
    u: &[E],
    delta: &[E],
    a_log: &[E],
    b: &[E],
    w_out: &[E],
    gy: &[E],
    l: usize,
    e: usize,
    n: usize,
) -> Vec<Vec<E>> {
    let neg_a = neg_exp(a_log);
    let sz = e * n;
    let mut hs = vec![E::zero(); (l + 1) * sz];
    for t in 0..l {
        let (prev, cur) = hs.split_at_mut((t + 1) * sz);
        let prev = &prev[t * sz..];
        let cur = &mut cur[..sz];
        for c in 0..e {
            let d = delta[t * e + c];
            let xc = u[t * e + c];
            for k in 0..n {
                let i = c * n + k;
                cur[i] = (d * neg_a[i]).exp() * prev[i] + d * b[t * n + k] * xc;
            }
        }
    }

    let mut gu = vec![E::zero(); l * e];
    let mut gdelta = vec![E::zero(); l * e];
    let mut ga = vec![E::zero(); sz];
    let mut gb = vec![E::zero(); l * n];
    let mut gw = vec![E::zero(); sz];
    let mut gh = vec![E::zero(); sz];
    for t in (0..l).rev() {
        let prev = &hs[t * sz..(t + 1) * sz];
        let cur = &hs[(t + 1) * sz..(t + 2) * sz];
        for c in 0..e {
            let g = gy[t * e + c];
            let d = delta[t * e + c];
            let xc = u[t * e + c];
            let mut gd = E::zero();
            let mut gx = E::zero();
            for k in 0..n {
                let i = c * n + k;
                gw[i] = gw[i] + g * cur[i];
                let ghi = gh[i] + g * w_out[i];
                let a_bar = (d * neg_a[i]).exp();
                let bn = b[t * n + k];
                let ga_bar = ghi * prev[i];
                gd = gd + ga_bar * a_bar * neg_a[i] + ghi * bn * xc;
                ga[i] = ga[i] + ga_bar * a_bar * d;
                gx = gx + ghi * d * bn;
                gb[t * n + k] = gb[t * n + k] + ghi * d * xc;
                gh[i] = ghi * a_bar;
            }
            gdelta[t * e + c] = gd;
            gu[t * e + c] = gx;
        }
    }
    // A = -exp(A_log) so dA/dA_log = A
    let ga_log = ga.iter().zip(&neg_a).map(|(&g, &a)| g * a).collect();
    vec![gu, gdelta, ga_log, gb, gw]
}

/// `softplus^{-1}(y) = y + ln(1 - e^{-y})`
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_parts(shape, (0..n).map(|_| rng.sample(dist) as f32).collect())
}

pub(crate) fn init_linear(
    store: &mut ParamStore<f32>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform_tensor(rng, vec![fan_in, fan_out], bound));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
    }
}

pub(crate) fn init_zero_linear(store: &mut ParamStore<f32>, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::zeros(vec![fan_in, fan_out]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
}

/// Initializes one Mamba block of model width `d` under `prefix`.
/// The output projection starts at zero so the block is an exact identity.
pub fn init_block(store: &mut ParamStore<f32>, prefix: &str, d: usize, cfg: &SsmConfig, rng: &mut impl Rng) {
    let e = cfg.expand * d;
    let n = cfg.state_size;
    store.insert(format!("{prefix}.norm.weight"), Tensor::full(vec![d], 1.0));
    store.insert(format!("{prefix}.norm.bias"), Tensor::zeros(vec![d]));
    init_linear(store, &format!("{prefix}.in_proj"), d, e, true, rng);
    init_linear(store, &format!("{prefix}.gate_proj"), d, e, true, rng);
    store.insert(
        format!("{prefix}.conv.weight"),
        uniform_tensor(rng, vec![e, cfg.conv_kernel], 1.0 / (cfg.conv_kernel as f64).sqrt()),
    );
    // -A = 1..=n along the state axis
    let a_log: Vec<f32> = (0..e).flat_map(|_| (1..=n).map(|k| (k as f32).ln())).collect();
    store.insert(format!("{prefix}.ssm.A_log"), Tensor::from_parts(vec![e, n], a_log));
    init_linear(store, &format!("{prefix}.ssm.proj_B"), e, n, true, rng);
    init_linear(store, &format!("{prefix}.ssm.proj_delta"), e, e, false, rng);
    let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
    let dist = Uniform::new_inclusive(lo, hi).expect("dt range");
    let bias: Vec<f32> = (0..e)
        .map(|_| inverse_softplus(rng.sample(dist).exp()) as f32)
        .collect();
    store.insert(format!("{prefix}.ssm.delta_bias"), Tensor::from_parts(vec![e], bias));
    store.insert(
        format!("{prefix}.ssm.W_out"),
        uniform_tensor(rng, vec![e, n], 1.0 / (n as f64).sqrt()),
    );
    init_zero_linear(store, &format!("{prefix}.out_proj"), e, d);
}

/// `x + out_proj(SSM(silu(conv(in_proj(norm x)))) ⊙ silu(gate(norm x)))` over `x [L, d]`.
pub fn mamba_block_forward<B: Backend>(b: &mut B, prefix: &str, x: &B::Value) -> Result<B::Value> {
    let gamma = b.param(&format!("{prefix}.norm.weight"))?;
    let d = b.shape(&gamma)[0];
    let xs = b.shape(x);
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::shape("mamba_block", xs, &[d]));
    }
    let beta = b.param(&format!("{prefix}.norm.bias"))?;
    let normed = b.layer_norm(x, &gamma, &beta)?;

    let u = b.linear_named(&normed, &format!("{prefix}.in_proj"), true)?;
    let conv_w = b.param(&format!("{prefix}.conv.weight"))?;
    let u = b.causal_conv1d(&u, &conv_w)?;
    let u = b.silu(&u)?;

    let gate = b.linear_named(&normed, &format!("{prefix}.gate_proj"), true)?;
    let gate = b.silu(&gate)?;

    let dt_w = b.param(&format!("{prefix}.ssm.proj_delta.weight"))?;
    let dt_b = b.param(&format!("{prefix}.ssm.delta_bias"))?;
    let dt = b.linear(&u, &dt_w, Some(&dt_b))?;
    let delta = b.softplus(&dt)?;
    let bm = b.linear_named(&u, &format!("{prefix}.ssm.proj_B"), true)?;
    let a_log = b.param(&format!("{prefix}.ssm.A_log"))?;
    let w_out = b.param(&format!("{prefix}.ssm.W_out"))?;
    let y = b.apply(crate::autodiff::Op::SelectiveScan, &[&u, &delta, &a_log, &bm, &w_out])?;

    let y = b.mul(&y, &gate)?;
    let out = b.linear_named(&y, &format!("{prefix}.out_proj"), true)?;
    b.add(x, &out)
}

/// Name of layer `i` under a head prefix.
pub fn layer_prefix(head: &str, i: usize) -> String {
    format!("{head}.layer{i}")
}

/// Composes `layers` blocks named `{prefix}.layer{i}`; returns the final output and every layer's output.
pub fn stack_forward<B: Backend>(
    b: &mut B,
    prefix: &str,
    layers: usize,
    x: &B::Value,
) -> Result<(B::Value, Vec<B::Value>)> {
    if layers == 0 {
        return Err(Error::invalid("stack_forward", "need at least one layer"));
    }
    let mut outs = Vec::with_capacity(layers);
    let mut cur = x.clone();
    for i in 0..layers {
        cur = mamba_block_forward(b, &layer_prefix(prefix, i), &cur)?;
        outs.push(cur.clone());
    }
    Ok((cur, outs))
}
