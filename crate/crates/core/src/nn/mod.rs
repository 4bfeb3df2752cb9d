//! Sequential network engine with per-unit freeze masks.
//!
//! Frozen layers still run forward and propagate input gradients; they only
//! skip parameter gradients, optimizer updates and (for batch norm) running
//! statistic updates.

mod layers;
mod model;
mod optim;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

pub use model::{Model, Trace, BN_EPSILON, BN_MOMENTUM};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use crate::{Error, Result, Tensor};

/// Set of trainable-unit indices selected for training this round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct FreezeMask {
    units: BTreeSet<usize>,
}

impl FreezeMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all(num_units: usize) -> Self {
        Self { units: (0..num_units).collect() }
    }

    pub fn from_units(units: impl IntoIterator<Item = usize>) -> Self {
        Self { units: units.into_iter().collect() }
    }

    pub fn contains(&self, unit: usize) -> bool {
        self.units.contains(&unit)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Unit indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.units.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn validate(&self, num_units: usize) -> Result<()> {
        match self.units.iter().next_back() {
            Some(&u) if u >= num_units => Err(Error::Mask(format!(
                "unit {} out of range for a model with {} trainable units",
                u, num_units
            ))),
            _ => Ok(()),
        }
    }
}

/// Parameter gradients keyed by layer index. Only the gradient-trainable
/// tensors of a layer are present (weights and bias, or gamma and beta).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S> {
    layers: BTreeMap<usize, Vec<Tensor<S>>>,
}

impl<S> Default for GradientSet<S> {
    fn default() -> Self {
        Self { layers: BTreeMap::new() }
    }
}

impl<S> GradientSet<S> {
    pub fn from_layers(layers: impl IntoIterator<Item = (usize, Vec<Tensor<S>>)>) -> Self {
        Self { layers: layers.into_iter().collect() }
    }

    pub fn get(&self, layer: usize) -> Option<&[Tensor<S>]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Tensor<S>])> {
        self.layers.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn insert(&mut self, layer: usize, grads: Vec<Tensor<S>>) {
        self.layers.insert(layer, grads);
    }
}
