//! Order-aware concatenation and flattening.
//!
//! Two patched maps of shape `rows x cols x ch` are interleaved into one
//! `2 * rows * cols` token sequence. Each row is visited top to bottom; within
//! a row the even columns go left to right, then the odd columns right to
//! left. Every visited pixel contributes its RGB token followed by its
//! thermal token, so tokens `2m` and `2m + 1` always share a pixel.

use std::sync::Arc;

use crate::autodiff::{Backend, Eager, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Thermal,
}

/// Precomputed gather/scatter tables for one `(rows, cols)` geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct OcfLayout {
    rows: usize,
    cols: usize,
    /// `order[token]` indexes the stacked `[rgb pixels; thermal pixels]` rows.
    order: Arc<[usize]>,
    /// Inverse of `order`.
    inverse: Arc<[usize]>,
}

/// Column visit order within one row.
pub fn column_order(cols: usize) -> Vec<usize> {
    let even = (0..cols).step_by(2);
    let odd = (1..cols).step_by(2).rev();
    even.chain(odd).collect()
}

pub fn build_layout(rows: usize, cols: usize) -> Result<OcfLayout> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("build_layout", format!("dimensions must be positive, got {rows}x{cols}")));
    }
    let plane = rows * cols;
    let visit = column_order(cols);
    let mut order = Vec::with_capacity(2 * plane);
    for i in 0..rows {
        for &j in &visit {
            order.push(i * cols + j);
            order.push(plane + i * cols + j);
        }
    }
    let mut inverse = vec![0; order.len()];
    for (t, &src) in order.iter().enumerate() {
        inverse[src] = t;
    }
    Ok(OcfLayout {
        rows,
        cols,
        order: order.into(),
        inverse: inverse.into(),
    })
}

impl OcfLayout {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `(modality, row, col)` carried by token `t`.
    pub fn token(&self, t: usize) -> (Modality, usize, usize) {
        let plane = self.rows * self.cols;
        let src = self.order[t];
        let m = if src < plane { Modality::Rgb } else { Modality::Thermal };
        let p = src % plane;
        (m, p / self.cols, p % self.cols)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn check_map(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 || shape[0] != self.rows || shape[1] != self.cols {
            return Err(Error::shape("ocf", &[self.rows, self.cols], shape));
        }
        Ok(shape[2])
    }
}

/// Interleaves the two maps into `[2 * rows * cols, ch]` tokens.
pub fn ocf_flatten<B: Backend>(b: &mut B, layout: &OcfLayout, rgb: &B::Value, thermal: &B::Value) -> Result<B::Value> {
    if b.shape(rgb) != b.shape(thermal) {
        return Err(Error::shape("ocf_flatten", b.shape(rgb), b.shape(thermal)));
    }
    let ch = layout.check_map(b.shape(rgb))?;
    let plane = layout.rows * layout.cols;
    let r = b.reshape(rgb, &[plane, ch])?;
    let t = b.reshape(thermal, &[plane, ch])?;
    let stacked = b.concat(&[&r, &t], 0)?;
    b.gather(&stacked, layout.order.clone())
}

/// Exact inverse of [`ocf_flatten`].
pub fn ocf_unflatten<B: Backend>(b: &mut B, layout: &OcfLayout, tokens: &B::Value) -> Result<(B::Value, B::Value)> {
    let shape = b.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != layout.len() {
        return Err(Error::invalid(
            "ocf_unflatten",
            format!("expected {} tokens, got shape {shape:?}", layout.len()),
        ));
    }
    let ch = shape[1];
    let plane = layout.rows * layout.cols;
    let stacked = b.gather(tokens, layout.inverse.clone())?;
    let r = b.slice(&stacked, 0, 0, plane)?;
    let t = b.slice(&stacked, 0, plane, plane)?;
    let r = b.reshape(&r, &[layout.rows, layout.cols, ch])?;
    let t = b.reshape(&t, &[layout.rows, layout.cols, ch])?;
    Ok((r, t))
}

/// [`ocf_flatten`] on plain tensors.
pub fn flatten<E: Element>(layout: &OcfLayout, rgb: &Tensor<E>, thermal: &Tensor<E>) -> Result<Tensor<E>> {
    let params = ParamStore::new();
    ocf_flatten(&mut Eager::new(&params), layout, rgb, thermal)
}

/// [`ocf_unflatten`] on plain tensors.
pub fn unflatten<E: Element>(layout: &OcfLayout, tokens: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
    let params = ParamStore::new();
    ocf_unflatten(&mut Eager::new(&params), layout, tokens)
}
