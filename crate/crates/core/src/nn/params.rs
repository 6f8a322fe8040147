use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of the trainable tensors of one network.
///
/// Iteration order is insertion order, so two stores built by the same
/// network definition always line up index by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, tensor);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.entries[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx]
    }

    pub fn name_of(&self, idx: usize) -> &str {
        self.entries.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Rounds every value to the nearest `f32`, so the store survives a
    /// 32-bit checkpoint unchanged.
    pub fn quantize_f32(&mut self) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn is_f32_exact(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|&v| (v as f32 as f64).to_bits() == v.to_bits()))
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// Gradient buffers aligned index-by-index with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            grads: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.grads[idx]
    }

    pub fn by_name<'a>(&'a self, store: &ParameterStore, name: &str) -> Result<&'a Tensor> {
        Ok(&self.grads[store.index_of(name)?])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
