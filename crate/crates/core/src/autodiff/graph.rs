use std::collections::BTreeMap;

use super::ops::{self, Op};
use super::params::ParamStore;
use super::Backend;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Gradient of a scalar loss with respect to each trainable parameter.
pub type Gradients<E> = BTreeMap<String, Tensor<E>>;

/// Evaluates ops immediately without recording anything.
pub struct Eager<'p, E: Element = f32> {
    params: &'p ParamStore<E>,
}

impl<'p, E: Element> Eager<'p, E> {
    pub fn new(params: &'p ParamStore<E>) -> Self {
        Self { params }
    }
}

impl<E: Element> Backend for Eager<'_, E> {
    type Elem = E;
    type Value = Tensor<E>;

    fn param(&mut self, name: &str) -> Result<Tensor<E>> {
        self.params.get(name).cloned()
    }

    fn constant(&mut self, t: Tensor<E>) -> Tensor<E> {
        t
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        ops::forward(&op, inputs)
    }

    fn value<'a>(&'a self, v: &'a Tensor<E>) -> &'a Tensor<E> {
        v
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct Node<E> {
    op: Option<Op>,
    inputs: Vec<Var>,
    value: Tensor<E>,
    requires_grad: bool,
}

/// Recording tape. Nodes are appended in execution order, so the node list
/// is already a topological order and reverse iteration is a valid backward
/// schedule.
pub struct Graph<'p, E: Element = f32> {
    params: &'p ParamStore<E>,
    nodes: Vec<Node<E>>,
    param_vars: BTreeMap<String, Var>,
    recording: bool,
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn new(params: &'p ParamStore<E>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            recording: true,
        }
    }

    /// While disabled, new nodes are created detached (no gradient flows).
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<E>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`. Every parameter fetched through
    /// [`Backend::param`] gets an entry, zero if unreachable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "graph is empty"));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("backward", "loss is not a node of this graph"))?;
        if root.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), E::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &g)?;
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    None => gi,
                    Some(acc) => {
                        let data = acc.data().iter().zip(gi.data()).map(|(&a, &b)| a + b).collect();
                        Tensor::from_parts(acc.shape().to_vec(), data)
                    }
                });
            }
        }

        let mut out = Gradients::new();
        for (name, var) in &self.param_vars {
            let shape = self.nodes[var.0].value.shape().to_vec();
            let g = grads
                .get(var.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

impl<E: Element> Backend for Graph<'_, E> {
    type Elem = E;
    type Value = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad: self.recording,
        });
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value: t,
            requires_grad: false,
        })
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor<E>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(&op, &values)?;
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            op: requires_grad.then_some(op),
            inputs: if requires_grad { inputs.iter().map(|&&v| v).collect() } else { Vec::new() },
            value,
            requires_grad,
        }))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<E> {
        &self.nodes[v.0].value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, &[usize], &[f64])]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for (n, s, d) in entries {
            p.insert(*n, Tensor::from_f64s(s.to_vec(), d).unwrap());
        }
        p
    }

    #[test]
    fn linear_gradient_is_input() {
        // loss = sum(x W) with x fixed: dL/dW[i, j] = x[i]
        let p = store(&[("w", &[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])]);
        let mut g = Graph::new(&p);
        let x = g.constant(Tensor::from_f64s(vec![1, 3], &[1.0, -2.0, 3.0]).unwrap());
        let w = g.param("w").unwrap();
        let y = g.matmul(&x, &w).unwrap();
        let l = g.sum(&y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let p = store(&[("w", &[2], &[1.0, 2.0])]);
        let mut g = Graph::new(&p);
        let _w = g.param("w").unwrap();
        let c = g.constant(Tensor::from_f64s(vec![2], &[3.0, 4.0]).unwrap());
        let l = g.sum(&c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let p = ParamStore::<f64>::new();
        let g = Graph::new(&p);
        assert!(g.backward(Var(0)).is_err());
        let p = store(&[("w", &[2], &[1.0, 2.0])]);
        let mut g = Graph::new(&p);
        let w = g.param("w").unwrap();
        let y = g.exp(&w).unwrap();
        assert!(g.backward(y).unwrap_err().to_string().contains("scalar"));
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(w * w) -> 2w
        let p = store(&[("w", &[2], &[1.5, -3.0])]);
        let mut g = Graph::new(&p);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        let y = g.mul(&a, &b).unwrap();
        let l = g.sum(&y).unwrap();
        assert_eq!(g.backward(l).unwrap()["w"].data(), &[3.0, -6.0]);
    }

    #[test]
    fn detached_nodes_block_gradient() {
        let p = store(&[("w", &[1], &[2.0])]);
        let mut g = Graph::new(&p);
        g.set_recording(false);
        let w = g.param("w").unwrap();
        g.set_recording(true);
        let y = g.mul(&w, &w).unwrap();
        let l = g.sum(&y).unwrap();
        assert_eq!(g.backward(l).unwrap()["w"].data(), &[0.0]);
    }
}
