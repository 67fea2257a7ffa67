use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters with one gradient accumulator each.
///
/// Iteration follows insertion order, so two sets built the same way walk
/// their entries identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.rows(), value.cols());
        let grad = grad.reshape(value.shape().to_vec()).expect("same element count");
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param) {
        let (k, v) = self.entries.get_index(idx).expect("index in range");
        (k.as_str(), v)
    }

    pub(crate) fn grad_by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries.get_index_mut(idx).expect("index in range").1.grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &ParamSet) {
        for (name, p) in other.iter() {
            self.entries.insert(name.to_string(), p.clone());
        }
    }

    /// SHA-256 over names, shapes and values of every parameter whose name
    /// starts with `prefix`, in insertion order. Hex-encoded.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values_and_prefix() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::full(2, 2, 1.0));
        p.insert("b.w", Tensor::full(1, 3, 2.0));
        let a0 = p.checksum("a.");
        let b0 = p.checksum("b.");
        p.value_mut("b.w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(p.checksum("a."), a0);
        assert_ne!(p.checksum("b."), b0);
    }

    #[test]
    fn insertion_order_is_iteration_order() {
        let mut p = ParamSet::new();
        for n in ["z", "a", "m"] {
            p.insert(n, Tensor::zeros(1, 1));
        }
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
        assert_eq!(p.grad("a").unwrap().shape(), &[1, 1]);
    }
}
