use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::ParamSource;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    base: usize,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store whose ids start at `base`. Two stores with disjoint id ranges
    /// can feed the same graph through [`ParamSource`] for a pair.
    pub fn with_base(base: usize) -> Self {
        Self { base, ..Self::default() }
    }

    fn slot(&self, id: ParamId) -> usize {
        id.0.checked_sub(self.base).filter(|&i| i < self.values.len()).expect("parameter id from another store")
    }

    pub fn contains(&self, id: ParamId) -> bool {
        id.0 >= self.base && id.0 - self.base < self.values.len()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidShape(format!("parameter `{name}` registered twice")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.base + self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[self.slot(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.slot(id);
        &mut self.values[i]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let i = self.slot(id);
        let cur = &self.values[i];
        if cur.shape() != value.shape() {
            return Err(Error::InvalidShape(format!(
                "parameter `{}` is {:?}, got {:?}",
                self.names[i],
                cur.shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.slot(id)]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId(self.base + i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        let base = self.base;
        (0..self.values.len()).map(move |i| ParamId(base + i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(self.base + i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

impl ParamSource for ParamStore {
    fn param(&self, id: ParamId) -> Option<&Tensor> {
        if self.contains(id) {
            Some(&self.values[id.0 - self.base])
        } else {
            None
        }
    }
}

impl ParamSource for (&ParamStore, &ParamStore) {
    fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.0.param(id).or_else(|| self.1.param(id))
    }
}

/// Gradient of a scalar with respect to each parameter it depends on.
pub type GradientMap = BTreeMap<ParamId, Tensor>;
