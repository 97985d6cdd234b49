use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Read access to named parameter values. Implemented by the trainable store
/// and by EMA shadows so evaluation code can run on either.
pub trait ParamSource {
    fn value(&self, name: &str) -> Option<&Matrix>;

    fn require(&self, name: &str) -> Result<&Matrix> {
        self.value(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable arrays with paired gradient buffers.
///
/// Iteration order is the lexicographic order of names, which keeps
/// optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter with a zeroed gradient.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|p| &p.grad)
    }

    /// Overwrite a parameter value in place; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{name}` is {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Accumulate into one gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Matrix) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.entries.values_mut() {
                p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Copy of all values keyed by name.
    pub fn values(&self) -> BTreeMap<String, Matrix> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}

impl ParamSource for ParamStore {
    fn value(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|p| &p.value)
    }
}

impl ParamSource for BTreeMap<String, Matrix> {
    fn value(&self, name: &str) -> Option<&Matrix> {
        self.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(s.insert("w", Matrix::zeros(1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grads_clears_every_element() {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::zeros(2, 3)).unwrap();
        s.insert("b", Matrix::zeros(1, 3)).unwrap();
        s.accumulate_grad("a", &Matrix::filled(2, 3, 1.5)).unwrap();
        s.accumulate_grad("b", &Matrix::filled(1, 3, -2.0)).unwrap();
        s.zero_grads();
        for (_, p) in s.iter() {
            assert!(p.grad.as_slice().iter().all(|&g| g == 0.0));
            assert_eq!(p.grad.shape(), p.value.shape());
        }
    }

    #[test]
    fn accumulate_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            s.accumulate_grad("a", &Matrix::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            s.accumulate_grad("nope", &Matrix::zeros(2, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::zeros(1, 2)).unwrap();
        s.accumulate_grad("a", &Matrix::row_vector(&[30.0, 40.0])).unwrap();
        let before = s.clip_grad_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
    }
}
