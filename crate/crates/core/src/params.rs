//! Named parameter storage with per-parameter gradient accumulators.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Parameters and their gradients. Iteration is lexicographic by name.
///
/// Gradients accumulate (`+=`) across backward calls; callers zero them
/// explicitly with [`ParamStore::zero_grad`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Read-only view of parameter values, used by forward kernels.
#[derive(Clone, Copy)]
pub struct Values<'a>(&'a [Tensor]);

/// Mutable view of gradient accumulators, used by backward kernels.
pub struct Grads<'a>(&'a mut [Tensor]);

impl<'a> Values<'a> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &'a Tensor {
        &self.0[id.0]
    }

    #[inline]
    pub fn scalar(&self, id: ParamId) -> f64 {
        self.0[id.0].data()[0]
    }
}

impl Grads<'_> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.0[id.0].data_mut()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on duplicate names, which are a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> Values<'_> {
        Values(&self.values)
    }

    /// Splits into a value view and a gradient view so backward kernels can
    /// read weights while accumulating gradients.
    pub fn split_mut(&mut self) -> (Values<'_>, Grads<'_>) {
        (Values(&self.values), Grads(&mut self.grads))
    }

    /// Ids in lexicographic name order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().map(|&i| ParamId(i))
    }

    /// `(name, value, grad)` in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> + '_ {
        self.index
            .iter()
            .map(|(name, &i)| (name.as_str(), &self.values[i], &self.grads[i]))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Non-trainable state (running normalization statistics), lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore {
    entries: BTreeMap<String, Tensor>,
}

impl BufferStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate buffer `{name}`");
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
