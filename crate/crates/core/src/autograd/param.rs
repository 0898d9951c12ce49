use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// What a parameter is used for; weight decay can be restricted by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor plus its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
    pub momentum_buffer: Vec<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor<T>) -> ParamId {
        let momentum_buffer = vec![T::zero(); tensor.len()];
        self.params.push(Parameter { name: name.into(), role, tensor, momentum_buffer });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Builds gradients from explicit per-parameter arrays.
    pub fn from_vec(grads: Vec<Option<Vec<T>>>) -> Self {
        Self { grads }
    }

    pub(crate) fn check_against(&self, store: &ParamStore<T>) -> Result<()> {
        if self.grads.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                detail: alloc::format!("{} grads for {} params", self.grads.len(), store.len()),
            });
        }
        for (g, p) in self.grads.iter().zip(&store.params) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    return Err(Error::ShapeMismatch {
                        op: "sgd_step",
                        detail: alloc::format!("{}: grad {} vs param {}", p.name, g.len(), p.tensor.len()),
                    });
                }
            }
        }
        Ok(())
    }
}
