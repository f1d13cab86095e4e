//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! Model code is written once against the [`Backend`] trait and runs either
//! eagerly ([`Eager`], no tape, intermediates dropped as soon as possible) or
//! on a recording [`Graph`] that can be differentiated.

mod gradcheck;
mod graph;
mod ops;
mod params;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, Objective};
pub use graph::{Eager, Gradients, Graph, Var};
pub use ops::{backward as op_backward, forward as op_forward, output_shape, Op};
#[cfg(test)]
pub(crate) use ops::softplus;
pub use params::ParamStore;

use std::sync::Arc;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Execution target for model code.
pub trait Backend {
    type Elem: Element;
    type Value: Clone;

    /// Trainable parameter by name.
    fn param(&mut self, name: &str) -> Result<Self::Value>;

    /// Non-trainable input.
    fn constant(&mut self, t: Tensor<Self::Elem>) -> Self::Value;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<Self::Elem>;

    fn shape<'a>(&'a self, v: &'a Self::Value) -> &'a [usize] {
        self.value(v).shape()
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mul, &[a, b])
    }

    fn scale(&mut self, a: &Self::Value, s: f64) -> Result<Self::Value> {
        self.apply(Op::Scale(s), &[a])
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::MatMul, &[a, b])
    }

    /// `x @ w + b` over the last axis of `x`.
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value> {
        match b {
            Some(b) => self.apply(Op::Linear, &[x, w, b]),
            None => self.apply(Op::Linear, &[x, w]),
        }
    }

    /// Linear layer whose parameters live under `prefix.weight` / `prefix.bias`.
    fn linear_named(&mut self, x: &Self::Value, prefix: &str, bias: bool) -> Result<Self::Value> {
        let w = self.param(&format!("{prefix}.weight"))?;
        if bias {
            let b = self.param(&format!("{prefix}.bias"))?;
            self.linear(x, &w, Some(&b))
        } else {
            self.linear(x, &w, None)
        }
    }

    fn causal_conv1d(&mut self, x: &Self::Value, w: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::CausalConv1d, &[x, w])
    }

    fn layer_norm(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }

    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Silu, &[x])
    }

    fn softplus(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Softplus, &[x])
    }

    fn exp(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Exp, &[x])
    }

    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sigmoid, &[x])
    }

    fn smooth_l1(&mut self, pred: &Self::Value, target: &Self::Value, beta: f64) -> Result<Self::Value> {
        self.apply(Op::SmoothL1 { beta }, &[pred, target])
    }

    fn concat(&mut self, parts: &[&Self::Value], axis: usize) -> Result<Self::Value> {
        self.apply(Op::Concat { axis }, parts)
    }

    fn slice(&mut self, x: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    fn transpose(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value> {
        self.apply(Op::Transpose { perm: perm.to_vec() }, &[x])
    }

    fn gather(&mut self, x: &Self::Value, indices: Arc<[usize]>) -> Result<Self::Value> {
        self.apply(Op::Gather { indices }, &[x])
    }

    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sum, &[x])
    }

    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mean, &[x])
    }
}
