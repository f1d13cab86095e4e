//! Op set and its forward/backward kernels.
//!
//! Broadcasting is limited to leading-dimension expansion: for binary
//! elementwise ops the right operand may have a shape that is a suffix of the
//! left operand's shape, and is then repeated over the leading axes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ssm;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m, k] x [k, n]`
    MatMul,
    /// `x [.., in]`, `w [in, out]`, optional `b [out]`.
    Linear,
    /// `x [L, C]`, `w [C, k]`; left zero padding of `k - 1`.
    CausalConv1d,
    /// Normalizes the last axis; inputs `x`, `gamma`, `beta`.
    LayerNorm { eps: f64 },
    Silu,
    Softplus,
    Exp,
    Sigmoid,
    /// Elementwise smooth-L1 between `pred` and `target`.
    SmoothL1 { beta: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    Transpose { perm: Vec<usize> },
    /// Row gather along axis 0.
    Gather { indices: Arc<[usize]> },
    Sum,
    Mean,
    /// Selective scan `y = scan(u, delta, a_log, b, w_out)`, see [`crate::ssm`].
    SelectiveScan,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::CausalConv1d => "causal_conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu => "silu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Gather { .. } => "gather",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SelectiveScan => "selective_scan",
        }
    }
}

fn arity(op: &Op, inputs: usize) -> Result<()> {
    let ok = match op {
        Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::CausalConv1d | Op::SmoothL1 { .. } => inputs == 2,
        Op::Linear => inputs == 2 || inputs == 3,
        Op::LayerNorm { .. } => inputs == 3,
        Op::SelectiveScan => inputs == 5,
        Op::Concat { .. } => inputs >= 1,
        _ => inputs == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(op.name(), format!("wrong number of inputs: {inputs}")))
    }
}

/// Number of times `b` repeats across `a` under leading-dimension expansion.
fn broadcast_reps(op: &Op, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(a[..a.len() - b.len()].iter().product())
    } else {
        Err(Error::shape(op.name(), a, b))
    }
}

#[inline]
pub(crate) fn softplus<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[inline]
fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m, k] += g[m, n] * b[k, n]^T`
fn gemm_bt_acc<E: Element>(g: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            c[i * k + p] = c[i * k + p] + acc;
        }
    }
}

/// `c[k, n] += a[m, k]^T * g[m, n]`
fn gemm_at_acc<E: Element>(a: &[E], g: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + av * gv;
            }
        }
    }
}

fn check_matrix(op: &Op, t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::invalid(op.name(), format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Output shape for `op` applied to inputs of the given shapes.
pub fn output_shape(op: &Op, shapes: &[&[usize]]) -> Result<Vec<usize>> {
    arity(op, shapes.len())?;
    let s0 = shapes[0];
    let name = op.name();
    Ok(match op {
        Op::Add | Op::Sub | Op::Mul => {
            broadcast_reps(op, s0, shapes[1])?;
            s0.to_vec()
        }
        Op::SmoothL1 { .. } => {
            if s0 != shapes[1] {
                return Err(Error::shape(name, s0, shapes[1]));
            }
            s0.to_vec()
        }
        Op::Scale(_) | Op::Silu | Op::Softplus | Op::Exp | Op::Sigmoid => s0.to_vec(),
        Op::MatMul => {
            let (a, b) = (s0, shapes[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(Error::shape(name, a, b));
            }
            vec![a[0], b[1]]
        }
        Op::Linear => {
            let w = shapes[1];
            if w.len() != 2 || *s0.last().unwrap() != w[0] {
                return Err(Error::shape(name, s0, w));
            }
            if shapes.len() == 3 && shapes[2] != [w[1]] {
                return Err(Error::shape(name, w, shapes[2]));
            }
            let mut out = s0.to_vec();
            *out.last_mut().unwrap() = w[1];
            out
        }
        Op::CausalConv1d => {
            let w = shapes[1];
            if s0.len() != 2 || w.len() != 2 || s0[1] != w[0] {
                return Err(Error::shape(name, s0, w));
            }
            s0.to_vec()
        }
        Op::LayerNorm { .. } => {
            let d = *s0.last().unwrap();
            if shapes[1] != [d] || shapes[2] != [d] {
                return Err(Error::shape(name, s0, shapes[1]));
            }
            s0.to_vec()
        }
        Op::Concat { axis } => {
            let axis = *axis;
            if axis >= s0.len() {
                return Err(Error::invalid(name, format!("axis {axis} out of range for {s0:?}")));
            }
            let mut out = s0.to_vec();
            for s in &shapes[1..] {
                let compatible = s.len() == s0.len()
                    && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, s0, s));
                }
                out[axis] += s[axis];
            }
            out
        }
        Op::Slice { axis, start, len } => {
            if *axis >= s0.len() || *len == 0 || start + len > s0[*axis] {
                return Err(Error::invalid(
                    name,
                    format!("range {start}..{} on axis {axis} of {s0:?}", start + len),
                ));
            }
            let mut out = s0.to_vec();
            out[*axis] = *len;
            out
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != s0.iter().product::<usize>() || shape.contains(&0) {
                return Err(Error::shape(name, s0, shape));
            }
            shape.clone()
        }
        Op::Transpose { perm } => {
            let mut seen = vec![false; s0.len()];
            if perm.len() != s0.len() || perm.iter().any(|&p| p >= s0.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid(name, format!("bad permutation {perm:?} for {s0:?}")));
            }
            perm.iter().map(|&p| s0[p]).collect()
        }
        Op::Gather { indices } => {
            if indices.is_empty() || indices.iter().any(|&i| i >= s0[0]) {
                return Err(Error::invalid(name, format!("indices out of range for {s0:?}")));
            }
            let mut out = s0.to_vec();
            out[0] = indices.len();
            out
        }
        Op::Sum | Op::Mean => vec![1],
        Op::SelectiveScan => {
            let (u, delta, a_log, b, w) = (s0, shapes[1], shapes[2], shapes[3], shapes[4]);
            if u.len() != 2 || delta != u {
                return Err(Error::shape(name, u, delta));
            }
            if a_log.len() != 2 || a_log[0] != u[1] {
                return Err(Error::shape(name, u, a_log));
            }
            if b != [u[0], a_log[1]] {
                return Err(Error::shape(name, a_log, b));
            }
            if w != a_log {
                return Err(Error::shape(name, a_log, w));
            }
            u.to_vec()
        }
    })
}

fn binary<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
    let bd = b.data();
    let n = bd.len();
    a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect()
}

/// Forward kernel. Shapes are validated first.
pub fn forward<E: Element>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = output_shape(op, &shapes)?;
    let x = inputs[0];
    let data: Vec<E> = match op {
        Op::Add => binary(x, inputs[1], |a, b| a + b),
        Op::Sub => binary(x, inputs[1], |a, b| a - b),
        Op::Mul => binary(x, inputs[1], |a, b| a * b),
        Op::Scale(s) => {
            let s = E::from_f64(*s);
            x.data().iter().map(|&v| v * s).collect()
        }
        Op::MatMul => {
            let (m, k) = check_matrix(op, x)?;
            let n = inputs[1].shape()[1];
            let mut c = vec![E::zero(); m * n];
            gemm_acc(x.data(), inputs[1].data(), &mut c, m, k, n);
            c
        }
        Op::Linear => {
            let w = inputs[1];
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let m = x.numel() / k;
            let mut c = match inputs.get(2) {
                Some(b) => (0..m).flat_map(|_| b.data().iter().copied()).collect(),
                None => vec![E::zero(); m * n],
            };
            gemm_acc(x.data(), w.data(), &mut c, m, k, n);
            c
        }
        Op::CausalConv1d => {
            let (l, ch) = (x.shape()[0], x.shape()[1]);
            let k = inputs[1].shape()[1];
            let (xd, wd) = (x.data(), inputs[1].data());
            let mut y = vec![E::zero(); l * ch];
            for t in 0..l {
                for c in 0..ch {
                    let mut acc = E::zero();
                    for j in 0..k {
                        // tap j reads x[t - (k - 1) + j]
                        if t + j + 1 >= k {
                            acc = acc + wd[c * k + j] * xd[(t + j + 1 - k) * ch + c];
                        }
                    }
                    y[t * ch + c] = acc;
                }
            }
            y
        }
        Op::LayerNorm { eps } => {
            let d = x.last_dim();
            let (g, b) = (inputs[1].data(), inputs[2].data());
            let mut y = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(d) {
                let (mean, rstd) = moments(row, *eps);
                y.extend(row.iter().enumerate().map(|(i, &v)| (v - mean) * rstd * g[i] + b[i]));
            }
            y
        }
        Op::Silu => x.data().iter().map(|&v| silu(v)).collect(),
        Op::Softplus => x.data().iter().map(|&v| softplus(v)).collect(),
        Op::Exp => x.data().iter().map(|&v| v.exp()).collect(),
        Op::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        Op::SmoothL1 { beta } => {
            let beta = E::from_f64(*beta);
            let half = E::from_f64(0.5);
            binary(x, inputs[1], |p, t| {
                let d = (p - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
        }
        Op::Concat { axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk: usize = t.shape()[*axis..].iter().product();
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        }
        Op::Slice { axis, start, len } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let full = x.shape()[*axis] * inner;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            out
        }
        Op::Reshape { .. } => x.to_vec(),
        Op::Transpose { perm } => permute(x.data(), x.shape(), perm),
        Op::Gather { indices } => {
            let row = x.numel() / x.shape()[0];
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices.iter() {
                out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            out
        }
        Op::Sum => vec![x.data().iter().copied().sum()],
        Op::Mean => {
            let s: E = x.data().iter().copied().sum();
            vec![s / E::from_f64(x.numel() as f64)]
        }
        Op::SelectiveScan => {
            let (l, e) = (x.shape()[0], x.shape()[1]);
            let n = inputs[2].shape()[1];
            ssm::scan_forward(
                x.data(),
                inputs[1].data(),
                inputs[2].data(),
                inputs[3].data(),
                inputs[4].data(),
                l,
                e,
                n,
            )?
        }
    };
    Ok(Tensor::from_parts(out_shape, data))
}

fn moments<E: Element>(row: &[E], eps: f64) -> (E, E) {
    let d = E::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<E>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / d;
    (mean, E::one() / (var + E::from_f64(eps)).sqrt())
}

fn permute<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // odometer increment over the output index
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Vector-Jacobian product: gradient of each input given the output gradient.
pub fn backward<E: Element>(
    op: &Op,
    inputs: &[&Tensor<E>],
    output: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let x = inputs[0];
    let g = grad.data();
    let like = |t: &Tensor<E>, data: Vec<E>| Tensor::from_parts(t.shape().to_vec(), data);
    let reduce_rhs = |b: &Tensor<E>, vals: Vec<E>| {
        let n = b.numel();
        let mut acc = vec![E::zero(); n];
        for (i, v) in vals.into_iter().enumerate() {
            acc[i % n] = acc[i % n] + v;
        }
        Tensor::from_parts(b.shape().to_vec(), acc)
    };
    Ok(match op {
        Op::Add => vec![like(x, g.to_vec()), reduce_rhs(inputs[1], g.to_vec())],
        Op::Sub => vec![
            like(x, g.to_vec()),
            reduce_rhs(inputs[1], g.iter().map(|&v| -v).collect()),
        ],
        Op::Mul => {
            let b = inputs[1];
            let nb = b.numel();
            let ga = g.iter().enumerate().map(|(i, &v)| v * b.data()[i % nb]).collect();
            let gb = g.iter().zip(x.data()).map(|(&v, &a)| v * a).collect();
            vec![like(x, ga), reduce_rhs(b, gb)]
        }
        Op::Scale(s) => {
            let s = E::from_f64(*s);
            vec![like(x, g.iter().map(|&v| v * s).collect())]
        }
        Op::MatMul => {
            let b = inputs[1];
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = b.shape()[1];
            let mut ga = vec![E::zero(); m * k];
            gemm_bt_acc(g, b.data(), &mut ga, m, k, n);
            let mut gb = vec![E::zero(); k * n];
            gemm_at_acc(x.data(), g, &mut gb, m, k, n);
            vec![like(x, ga), like(b, gb)]
        }
        Op::Linear => {
            let w = inputs[1];
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let m = x.numel() / k;
            let mut gx = vec![E::zero(); m * k];
            gemm_bt_acc(g, w.data(), &mut gx, m, k, n);
            let mut gw = vec![E::zero(); k * n];
            gemm_at_acc(x.data(), g, &mut gw, m, k, n);
            let mut out = vec![like(x, gx), like(w, gw)];
            if let Some(b) = inputs.get(2) {
                out.push(reduce_rhs(b, g.to_vec()));
            }
            out
        }
        Op::CausalConv1d => {
            let w = inputs[1];
            let (l, ch) = (x.shape()[0], x.shape()[1]);
            let k = w.shape()[1];
            let (xd, wd) = (x.data(), w.data());
            let mut gx = vec![E::zero(); l * ch];
            let mut gw = vec![E::zero(); ch * k];
            for t in 0..l {
                for c in 0..ch {
                    let gv = g[t * ch + c];
                    for j in 0..k {
                        if t + j + 1 >= k {
                            let src = (t + j + 1 - k) * ch + c;
                            gx[src] = gx[src] + wd[c * k + j] * gv;
                            gw[c * k + j] = gw[c * k + j] + xd[src] * gv;
                        }
                    }
                }
            }
            vec![like(x, gx), like(w, gw)]
        }
        Op::LayerNorm { eps } => {
            let d = x.last_dim();
            let gamma = inputs[1].data();
            let mut gx = Vec::with_capacity(x.numel());
            let mut gg = vec![E::zero(); d];
            let mut gb = vec![E::zero(); d];
            let df = E::from_f64(d as f64);
            for (row, grow) in x.data().chunks_exact(d).zip(g.chunks_exact(d)) {
                let (mean, rstd) = moments(row, *eps);
                let xhat: Vec<E> = row.iter().map(|&v| (v - mean) * rstd).collect();
                let mut sum_dy = E::zero();
                let mut sum_dy_xhat = E::zero();
                for i in 0..d {
                    let dy = grow[i] * gamma[i];
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * xhat[i];
                    gg[i] = gg[i] + grow[i] * xhat[i];
                    gb[i] = gb[i] + grow[i];
                }
                for i in 0..d {
                    let dy = grow[i] * gamma[i];
                    gx.push(rstd * (dy - sum_dy / df - xhat[i] * sum_dy_xhat / df));
                }
            }
            vec![like(x, gx), like(inputs[1], gg), like(inputs[2], gb)]
        }
        Op::Silu => {
            let gx = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (E::one() - s))
                })
                .collect();
            vec![like(x, gx)]
        }
        Op::Softplus => vec![like(x, x.data().iter().zip(g).map(|(&v, &gv)| gv * sigmoid(v)).collect())],
        Op::Exp => vec![like(x, output.data().iter().zip(g).map(|(&y, &gv)| gv * y).collect())],
        Op::Sigmoid => vec![like(
            x,
            output.data().iter().zip(g).map(|(&y, &gv)| gv * y * (E::one() - y)).collect(),
        )],
        Op::SmoothL1 { beta } => {
            let beta = E::from_f64(*beta);
            let gp: Vec<E> = x
                .data()
                .iter()
                .zip(inputs[1].data())
                .zip(g)
                .map(|((&p, &t), &gv)| {
                    let d = p - t;
                    if d.abs() < beta {
                        gv * d / beta
                    } else {
                        gv * d.signum()
                    }
                })
                .collect();
            let gt = gp.iter().map(|&v| -v).collect();
            vec![like(x, gp), like(inputs[1], gt)]
        }
        Op::Concat { axis } => {
            let outer: usize = output.shape()[..*axis].iter().product();
            let full: usize = output.shape()[*axis..].iter().product();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let chunk: usize = t.shape()[*axis..].iter().product();
                let mut gt = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    gt.extend_from_slice(&g[o * full + offset..o * full + offset + chunk]);
                }
                offset += chunk;
                grads.push(like(t, gt));
            }
            grads
        }
        Op::Slice { axis, start, len } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let full = x.shape()[*axis] * inner;
            let mut gx = vec![E::zero(); x.numel()];
            for o in 0..outer {
                let dst = o * full + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![like(x, gx)]
        }
        Op::Reshape { .. } => vec![like(x, g.to_vec())],
        Op::Transpose { perm } => {
            let inv = inverse_perm(perm);
            vec![like(x, permute(g, output.shape(), &inv))]
        }
        Op::Gather { indices } => {
            let row = x.numel() / x.shape()[0];
            let mut gx = vec![E::zero(); x.numel()];
            for (o, &i) in indices.iter().enumerate() {
                for c in 0..row {
                    gx[i * row + c] = gx[i * row + c] + g[o * row + c];
                }
            }
            vec![like(x, gx)]
        }
        Op::Sum => vec![Tensor::full(x.shape().to_vec(), g[0])],
        Op::Mean => vec![Tensor::full(x.shape().to_vec(), g[0] / E::from_f64(x.numel() as f64))],
        Op::SelectiveScan => {
            let (l, e) = (x.shape()[0], x.shape()[1]);
            let n = inputs[2].shape()[1];
            let grads = ssm::scan_backward(
                x.data(),
                inputs[1].data(),
                inputs[2].data(),
                inputs[3].data(),
                inputs[4].data(),
                g,
                l,
                e,
                n,
            );
            inputs
                .iter()
                .zip(grads)
                .map(|(t, gd)| like(t, gd))
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(forward(&Op::MatMul, &[&a, &i]).unwrap().data(), a.data());
    }

    #[test]
    fn analytic_activations() {
        let z = t(&[1], &[0.0]);
        assert_eq!(forward(&Op::Silu, &[&z]).unwrap().data(), &[0.0]);
        let sp = forward(&Op::Softplus, &[&z]).unwrap().data()[0];
        assert!((sp - std::f32::consts::LN_2).abs() < 1e-7);
        assert!((sp - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn causal_conv_hand_example() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let w = t(&[1, 2], &[1., 1.]);
        assert_eq!(forward(&Op::CausalConv1d, &[&x, &w]).unwrap().data(), &[1., 3., 5.]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 3], &[0.; 6]);
        let err = forward(&Op::MatMul, &[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t(&[3, 2], &[0.; 6]);
        assert!(forward(&Op::Add, &[&a, &c]).is_err());
    }

    #[test]
    fn leading_dim_broadcast_only() {
        let a = t(&[2, 2, 3], &[1.; 12]);
        let b = t(&[3], &[1., 2., 3.]);
        let y = forward(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(&y.data()[..3], &[2., 3., 4.]);
        assert_eq!(&y.data()[9..], &[2., 3., 4.]);
        let bad = t(&[2], &[1., 2.]);
        assert!(forward(&Op::Add, &[&a, &bad]).is_err());
        // trailing-dim expansion is not supported
        let col = t(&[2, 2, 1], &[1.; 4]);
        assert!(forward(&Op::Add, &[&a, &col]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f32).collect::<Vec<_>>());
        let perm = vec![2, 0, 1];
        let y = forward(&Op::Transpose { perm: perm.clone() }, &[&x]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[i, j, k] = x[j, k, i]
        assert_eq!(y.data()[6 + 2], x.data()[(2 * 4) + 1]);
        let back = forward(&Op::Transpose { perm: inverse_perm(&perm) }, &[&y]).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let c = forward(&Op::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        let s = forward(&Op::Slice { axis: 1, start: 0, len: 2 }, &[&c]).unwrap();
        assert!(s.bit_eq(&a));
        let s = forward(&Op::Slice { axis: 1, start: 2, len: 1 }, &[&c]).unwrap();
        assert!(s.bit_eq(&b));
        assert!(forward(&Op::Slice { axis: 1, start: 2, len: 2 }, &[&c]).is_err());
    }
}
