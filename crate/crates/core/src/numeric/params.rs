use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
///
/// Insertion order is stable and is the order used for checkpoints,
/// optimizer buffers and EMA shadows.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidValue(format!("duplicate parameter `{name}`")));
        }
        tensor.requires_grad = true;
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::InvalidValue(format!("missing parameter `{name}`")))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(Tensor::len)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds a gradient set into the parameters' grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} gradients for {} parameters", grads.len(), self.len()),
            ));
        }
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// A store with the same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape())).unwrap();
        }
        out
    }

    /// Value-only copy without gradient buffers.
    pub fn detached(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            out.insert(name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap())
                .unwrap();
        }
        out
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Gradients of a scalar with respect to every parameter of a store.
/// Parameters the scalar does not depend on hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub(crate) Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients(vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    /// Gradient for `id`, with zeros when the scalar did not touch it.
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub(crate) fn add_into(&mut self, id: ParamId, delta: &[f64]) {
        match &mut self.0[id.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.0.iter().enumerate() {
            if let Some(g) = g {
                self.add_into(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_scalars() {
        let mut p = ParamStore::new();
        p.insert("m", Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(p.num_scalars(), 6);
        let mut q = ParamStore::new();
        q.insert("emb", Tensor::zeros(&[10, 4])).unwrap();
        q.insert("bias", Tensor::zeros(&[4])).unwrap();
        assert_eq!(q.num_scalars(), 44);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
