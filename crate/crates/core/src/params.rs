//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; the only kind weight decay applies to by default.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    /// Batch-norm running statistics: model state, never optimized.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn from_name(name: &str) -> ParamKind {
        match name.rsplit('.').next().unwrap_or("") {
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::BnGamma,
            "beta" => ParamKind::BnBeta,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => ParamKind::Weight,
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, name-indexed collection of tensors. Order is insertion order and
/// is what checkpoints and the optimizer iterate over.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let kind = ParamKind::from_name(&name);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn entry(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }
}
