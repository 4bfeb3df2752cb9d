//! Uniform random choice of the units a client trains in a round.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, FreezeMask, Result};

/// Draws `layer_budget` distinct units out of `num_units` uniformly.
///
/// Uses a partial Fisher-Yates shuffle, so for a fixed generator state the
/// selection for budget `k` is a prefix of the selection for `k + 1`.
pub fn select_layers<R: Rng + ?Sized>(num_units: usize, layer_budget: usize, rng: &mut R) -> Result<FreezeMask> {
    if layer_budget == 0 || layer_budget > num_units {
        return Err(Error::InvalidArgument(format!(
            "layer budget {} outside 1..={}",
            layer_budget, num_units
        )));
    }
    Ok(FreezeMask::from_units(selection_order(num_units, layer_budget, rng)))
}

/// The first `count` positions of a uniformly random permutation of
/// `0..n`, in draw order.
pub fn selection_order<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count.min(n));
    idx
}
