use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies values (not gradients) from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Adds `other`'s gradients into this store's gradients, parameter by parameter.
    pub fn accumulate_grads_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(g) = src.grad() {
                dst.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Moves every gradient buffer out of the store, in store order.
    pub fn take_grads(&mut self) -> Vec<Option<Vec<T>>> {
        self.tensors.iter_mut().map(Tensor::take_grad).collect()
    }

    /// Adds gradients produced by [`ParamStore::take_grads`] on a store with
    /// the same layout.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Consistency(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (i, (dst, g)) in self.tensors.iter_mut().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != dst.len() {
                    return Err(Error::Consistency(format!(
                        "gradient for `{}` has {} elements, expected {}",
                        self.names[i],
                        g.len(),
                        dst.len()
                    )));
                }
                dst.accumulate_grad(g);
            }
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Consistency("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Consistency(format!(
                    "shape of `{}` differs: {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// True when every value is bitwise identical.
    pub fn values_bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    pub fn max_abs_value_diff(&self, other: &ParamStore<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
