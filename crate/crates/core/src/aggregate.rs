//! Server-side aggregation of partial updates.
//!
//! Every unit is averaged over the clients that trained it, weighted by
//! their sample counts and renormalised over that subset. A unit nobody
//! trained keeps its previous global value.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::client::PartialUpdate;
use crate::seed::{stream_rng, Stream};
use crate::selection::selection_order;
use crate::{Error, Model, Result, Scalar};

/// Clients taking part in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    /// 1-based round index.
    pub round: u32,
    pub total_rounds: u32,
    /// Sampled client ids, ascending.
    pub clients: Vec<u32>,
    pub layer_budget: usize,
}

impl RoundPlan {
    /// Samples `max(1, round(fraction * n_clients))` distinct clients.
    pub fn sample(
        round: u32,
        total_rounds: u32,
        n_clients: usize,
        fraction: f64,
        layer_budget: usize,
        seed: u64,
    ) -> Result<Self> {
        if round == 0 || round > total_rounds {
            return Err(Error::InvalidArgument(format!("round {} outside 1..={}", round, total_rounds)));
        }
        if n_clients == 0 || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need clients and a fraction in (0, 1], got {} clients, fraction {}",
                n_clients, fraction
            )));
        }
        let take = (libm::round(fraction * n_clients as f64) as usize).clamp(1, n_clients);
        let mut clients: Vec<u32> = if take == n_clients {
            (0..n_clients as u32).collect()
        } else {
            let mut rng = stream_rng(seed, Stream::ClientSampling, 0, u64::from(round));
            selection_order(n_clients, take, &mut rng).into_iter().map(|c| c as u32).collect()
        };
        clients.sort_unstable();
        Ok(Self { round, total_rounds, clients, layer_budget })
    }
}

/// Normalised aggregation weights `n_k / sum_{j in T} n_j` of the clients
/// that trained `unit`, in ascending client order.
pub fn aggregation_weights<S: Scalar>(updates: &[PartialUpdate<S>], unit: usize) -> Vec<(u32, f64)> {
    let mut trained: Vec<&PartialUpdate<S>> = updates.iter().filter(|u| u.trained.contains(unit)).collect();
    trained.sort_by_key(|u| u.client_id);
    let total: u64 = trained.iter().map(|u| u.sample_count).sum();
    trained.iter().map(|u| (u.client_id, u.sample_count as f64 / total as f64)).collect()
}

fn check_update<S: Scalar>(update: &PartialUpdate<S>, previous: &Model<S>) -> Result<()> {
    update.trained.validate(previous.num_units())?;
    let layers: Vec<usize> = update.layers.keys().copied().collect();
    if layers != previous.masked_layers(&update.trained) {
        return Err(Error::Mask(format!(
            "client {} sent layers {:?} for units {:?}",
            update.client_id,
            layers,
            update.trained.to_vec()
        )));
    }
    for (&l, group) in &update.layers {
        let expected = previous.layer_params(l);
        if group.len() != expected.len() || group.iter().zip(expected).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape(format!("client {} layer {} parameter shapes differ", update.client_id, l)));
        }
    }
    if update.sample_count == 0 {
        return Err(Error::InvalidArgument(format!("client {} reported zero samples", update.client_id)));
    }
    if !update.is_finite() {
        return Err(Error::NonFinite(format!("update from client {}", update.client_id)));
    }
    Ok(())
}

/// Layer-wise weighted average of `updates` with carry-forward from
/// `previous`. Summation runs in ascending client order in `f64`, so the
/// result does not depend on the order of `updates`.
pub fn aggregate<S: Scalar>(updates: &[PartialUpdate<S>], previous: &Model<S>) -> Result<Model<S>> {
    let Some(first) = updates.first() else {
        return Err(Error::InvalidArgument("aggregation needs at least one update".into()));
    };
    let mut seen = BTreeSet::new();
    for u in updates {
        if u.round != first.round {
            return Err(Error::RoundMismatch { expected: first.round, got: u.round });
        }
        if !seen.insert(u.client_id) {
            return Err(Error::InvalidArgument(format!("duplicate update from client {}", u.client_id)));
        }
        check_update(u, previous)?;
    }
    let mut sorted: Vec<&PartialUpdate<S>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);

    let mut next = previous.clone();
    for (unit_index, unit) in previous.units().iter().enumerate() {
        let contributors: Vec<&PartialUpdate<S>> =
            sorted.iter().copied().filter(|u| u.trained.contains(unit_index)).collect();
        if contributors.is_empty() {
            continue;
        }
        let total: u64 = contributors.iter().map(|u| u.sample_count).sum();
        let weights: Vec<f64> = contributors.iter().map(|u| u.sample_count as f64 / total as f64).collect();
        for &layer in &unit.layers {
            let params = next.layer_params_mut(layer);
            for (t, tensor) in params.iter_mut().enumerate() {
                // Offsets from the first contributor, so identical inputs
                // reproduce their value exactly.
                let anchor = contributors[0].layers[&layer][t].data();
                let mut acc: Vec<f64> = anchor.iter().map(|v| v.as_f64()).collect();
                for (u, &w) in contributors.iter().zip(&weights).skip(1) {
                    for ((a, v), z) in acc.iter_mut().zip(u.layers[&layer][t].data()).zip(anchor) {
                        *a += w * (v.as_f64() - z.as_f64());
                    }
                }
                for (dst, a) in tensor.data_mut().iter_mut().zip(acc) {
                    *dst = S::from_f64(a);
                }
            }
        }
    }
    Ok(next)
}

/// `previous + (aggregated - previous) / round` when enabled, otherwise
/// `aggregated` unchanged.
pub fn apply_round_smoothing<S: Scalar>(
    previous: &Model<S>,
    aggregated: &Model<S>,
    round: u32,
    enabled: bool,
) -> Result<Model<S>> {
    if round == 0 {
        return Err(Error::InvalidArgument("smoothing is defined for rounds >= 1".into()));
    }
    if previous.params().len() != aggregated.params().len() {
        return Err(Error::Shape("models have different layer counts".into()));
    }
    if !enabled || round == 1 {
        return Ok(aggregated.clone());
    }
    let inv_t = S::from_f64(1.0 / f64::from(round));
    let mut out = aggregated.clone();
    for (layer, group) in previous.params().iter().enumerate() {
        for (dst, prev) in out.layer_params_mut(layer).iter_mut().zip(group) {
            if dst.shape() != prev.shape() {
                return Err(Error::Shape(format!("layer {} shapes differ", layer)));
            }
            for (d, &p) in dst.data_mut().iter_mut().zip(prev.data()) {
                *d = p + (*d - p) * inv_t;
            }
        }
    }
    Ok(out)
}

/// Global model with the bookkeeping the server carries across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState<S> {
    pub model: Model<S>,
    pub previous: Option<Model<S>>,
    /// Last completed round; 0 before training.
    pub round: u32,
    /// How many client updates each unit has received in total.
    pub contributions: Vec<u64>,
}

impl<S: Scalar> GlobalState<S> {
    pub fn new(model: Model<S>) -> Self {
        let units = model.num_units();
        Self { model, previous: None, round: 0, contributions: vec![0; units] }
    }

    /// Aggregates the updates of round `self.round + 1`, optionally smooths,
    /// and advances the round counter.
    pub fn advance(&mut self, updates: &[PartialUpdate<S>], smoothing: bool) -> Result<()> {
        let round = self.round + 1;
        if let Some(bad) = updates.iter().find(|u| u.round != round) {
            return Err(Error::RoundMismatch { expected: round, got: bad.round });
        }
        let aggregated = aggregate(updates, &self.model)?;
        let next = apply_round_smoothing(&self.model, &aggregated, round, smoothing)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("global model after round {}", round)));
        }
        for u in updates {
            for unit in u.trained.iter() {
                self.contributions[unit] += 1;
            }
        }
        self.previous = Some(core::mem::replace(&mut self.model, next));
        self.round = round;
        Ok(())
    }
}
