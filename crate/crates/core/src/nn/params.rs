use std::collections::BTreeMap;

use rand::Rng;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Param<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "gradient {} does not match parameter `{name}` {}",
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<S>) -> Result<()> {
        let existing = self.grad(name).cloned();
        match existing {
            None => self.set_grad(name, grad.clone()),
            Some(mut acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
                self.set_grad(name, acc)
            }
        }
    }

    pub(crate) fn value_and_grad_mut(
        &mut self,
        name: &str,
    ) -> Option<(&mut Tensor<S>, Option<&Tensor<S>>)> {
        self.params
            .get_mut(name)
            .map(|p| (&mut p.value, p.grad.as_ref()))
    }

    /// Whether any two stores share a tensor allocation.
    pub fn aliases(&self, other: &ParamStore<S>) -> bool {
        self.params.values().any(|a| {
            other
                .params
                .values()
                .any(|b| std::ptr::eq(a.value.data().as_ptr(), b.value.data().as_ptr()))
        })
    }
}

/// Kaiming-uniform fan-in initialisation: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<S: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
