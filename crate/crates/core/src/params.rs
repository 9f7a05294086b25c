//! Named parameter storage.

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Learnable tensors plus non-learnable buffers (batch-norm running
/// statistics), both kept in insertion order.
///
/// Every mutable access bumps a generation counter; forward caches record the
/// generation they were computed at so a backward pass against a store that
/// has since changed is rejected.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
    generation: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            generation: 0,
        }
    }
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.buffers == other.buffers
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        self.generation += 1;
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, value);
        self.generation += 1;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.generation += 1;
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.generation += 1;
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    /// Replaces a tensor's contents, keeping its shape fixed.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.param_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(shape_err!("parameter {name} has shape {}, got {}", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.buffer_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(shape_err!("buffer {name} has shape {}, got {}", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.generation += 1;
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            generation: 0,
        }
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { grads: IndexMap::new() }
    }

    /// Adds `grad` into the slot for `name`, creating it on first use.
    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(slot) => slot.add_assign(&grad),
            None => {
                self.grads.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Fills in zero gradients for any parameter of `store` without one.
    pub fn complete_with_zeros(&mut self, store: &ParamStore<T>) {
        for (name, p) in store.params() {
            if !self.grads.contains_key(name) {
                self.grads.insert(name.to_string(), Tensor::zeros(p.dims()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_generation_moves() {
        let mut s = ParamStore::<f32>::new();
        s.insert_param("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert_param("a", Tensor::zeros(&[2])).is_err());
        assert!(s.insert_buffer("a", Tensor::zeros(&[2])).is_err());
        let g0 = s.generation();
        s.param_mut("a").unwrap().data_mut()[0] = 1.0;
        assert!(s.generation() > g0);
        assert!(s.set_param("a", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.param_count(), 2);
    }

    #[test]
    fn gradients_accumulate() {
        let mut g = Gradients::<f64>::new();
        g.accumulate("w", Tensor::full(&[2], 1.0).unwrap()).unwrap();
        g.accumulate("w", Tensor::full(&[2], 2.0).unwrap()).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[3.0, 3.0]);
        assert!(g.accumulate("w", Tensor::zeros(&[3])).is_err());
    }
}
