//! Named parameter storage shared by all trainable modules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
///
/// Modules keep only [`ParamId`]s, so the same module can run on an `f32`
/// store for training and on an `f64` cast of it for gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(false));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites the tensor called `name`, which must exist with the same shape.
    pub fn assign(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::contract(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor.clone().with_requires_grad(false);
        Ok(())
    }

    /// Copies every tensor of `other` whose name starts with `prefix` into
    /// `self`. Returns the number of tensors copied.
    pub fn copy_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.assign(name, t)?;
            n += 1;
        }
        Ok(n)
    }

    /// Inserts every tensor into `g`, as trainable leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars =
            self.tensors.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        Bound(vars)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and values.
    pub fn sha256(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// The graph variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// `x · w + bias` for `x` of shape `n × in`.
    pub fn linear<T: Scalar>(&self, g: &mut Graph<T>, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
        let y = g.matmul(x, self.var(w))?;
        g.add_bias(y, self.var(bias))
    }

    pub fn layer_norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        g.layer_norm(x, self.var(gamma), self.var(beta))
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// Truncated normal scaled by `1/sqrt(fan_in)`.
pub fn fan_in_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    trunc_normal(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}
