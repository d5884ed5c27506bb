use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable parameters with gradient buffers of matching shape.
///
/// Iteration order is the lexicographic order of the names, which keeps
/// checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if p.grad.shape() != grad.shape() {
            return Err(shape_err(
                "ParamStore::accumulate",
                format!("`{name}`: {:?} vs {:?}", p.grad.shape(), grad.shape()),
            ));
        }
        p.grad.add_assign(grad)
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g *= k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_track_value_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2, 3], 1.0));
        assert_eq!(s.grad("w").unwrap().shape(), &[2, 3]);
        s.accumulate("w", &Tensor::full(&[2, 3], 0.5)).unwrap();
        assert!(s.accumulate("w", &Tensor::zeros(&[3, 2])).is_err());
        assert!(s.accumulate("nope", &Tensor::zeros(&[1])).is_err());
        s.zero_grad();
        assert_eq!(s.grad("w").unwrap().sum(), 0.0);
    }
}
