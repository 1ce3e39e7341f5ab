use std::collections::BTreeMap;

use super::ops::Op;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order, so the backward pass is one reverse
/// sweep.
pub struct Graph<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Inserts a leaf that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns the gradient of every
    /// differentiable leaf that lies on a path to the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite { op: format!("{} (forward loss)", self.nodes[loss.0].op.name()) });
        }
        let mut bufs = GradBufs::new(&self.nodes, loss.0);
        let mut out = BTreeMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: out });
        }
        bufs.seed(loss.0);
        for idx in (0..=loss.0).rev() {
            let Some(go) = bufs.take(idx) else {
                continue;
            };
            if let Some(bad) = go.iter().position(|v| !v.is_finite()) {
                let culprit = bufs.writer[idx].unwrap_or("seed");
                return Err(Error::NonFinite {
                    op: format!("{culprit} (gradient of node {idx} `{}`, element {bad})", self.nodes[idx].op.name()),
                });
            }
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                out.insert(idx, Tensor::from_parts(node.value.shape().to_vec(), go));
            } else {
                self.backward_node(idx, go, &mut bufs)?;
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Lazily allocated gradient accumulators, one per node that needs one.
pub(crate) struct GradBufs<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
    pub(crate) writer: Vec<Option<&'static str>>,
    current: &'static str,
}

impl<T: Scalar> GradBufs<T> {
    fn new(nodes: &[Node<T>], upto: usize) -> Self {
        let n = upto + 1;
        Self {
            bufs: (0..n).map(|_| None).collect(),
            needs: nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
            lens: nodes[..n].iter().map(|nd| nd.value.numel()).collect(),
            writer: vec![None; n],
            current: "seed",
        }
    }

    fn seed(&mut self, idx: usize) {
        self.bufs[idx] = Some(vec![T::one()]);
    }

    fn take(&mut self, idx: usize) -> Option<Vec<T>> {
        self.bufs[idx].take()
    }

    pub(crate) fn set_current(&mut self, name: &'static str) {
        self.current = name;
    }

    /// Adds `g` into the accumulator of `v`, taking ownership when it is
    /// still empty.
    pub(crate) fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.needs[v.0] {
            return;
        }
        self.writer[v.0] = Some(self.current);
        match &mut self.bufs[v.0] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulator for `v`, or `None` when `v` is not differentiated.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        self.writer[v.0] = Some(self.current);
        let len = self.lens[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Gradients of a loss with respect to the differentiable leaves of a graph.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads.get(&v.0).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
