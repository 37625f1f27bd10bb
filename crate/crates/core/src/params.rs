//! Named parameter storage shared by every layer of a model.
//!
//! Layers hold [`ParamId`] handles and read their weights from a
//! [`ParamStore`] at forward time. The optimizer and the checkpoint code
//! operate on the store directly, in registration order.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value.into_leaf(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace the values of a parameter, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if data.len() != cur.numel() {
            return Err(Error::dim(
                "set_data",
                format!(
                    "{} expects {} values, got {}",
                    self.names[id.0],
                    cur.numel(),
                    data.len()
                ),
            ));
        }
        self.tensors[id.0] = Tensor::param(cur.shape(), data)?;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.set_data(id, data)
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }

    /// Same names and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>()).collect(),
        }
    }
}

/// Weight initialization helpers bound to a store and an Rng.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn trunc_normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.trunc_normal(std))).collect();
        self.store.register(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.normal() * std)).collect();
        self.store.register(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.register(name, Tensor::full(shape, T::of(v)))
    }
}
