use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Named trainable tensors in a fixed order.
///
/// The order is the order in which the backbone allocates them, followed by
/// the head; the optimizer and the checkpoint format both rely on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Whether `name` enters the L2 penalty: weights yes, biases no.
    pub fn is_regularized(name: &str) -> bool {
        name.ends_with(".weight")
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`,
    /// in the same order.
    pub fn check_layout<U: Real>(&self, reference: &ModelParams<U>) -> Result<()> {
        for (name, expected) in reference.iter() {
            let Some(found) = self.get(name) else {
                return Err(Error::MissingParam(name.to_string()));
            };
            if found.dims() != expected.dims() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: expected.dims().to_vec(),
                    found: found.dims().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::UnexpectedParam(extra.to_string()));
        }
        Ok(())
    }
}
