use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Named learnable tensors in deterministic insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; it is switched to requires-gradient. Duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor) {
        let (k, v) = self.tensors.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Tensor) {
        let (k, v) = self.tensors.get_index_mut(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
