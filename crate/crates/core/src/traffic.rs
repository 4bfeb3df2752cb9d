//! Uplink volume under uniform random unit selection.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::tensor_bytes;
use crate::seed::{stream_rng, Stream};
use crate::selection::selection_order;
use crate::{Architecture, Error, FreezeMask, Result, Unit};

/// Raw tensor bytes a client uploads when training the units in `mask`.
pub fn uplink_tensor_bytes(units: &[Unit], mask: &FreezeMask) -> u64 {
    tensor_bytes(mask.iter().map(|u| units[u].param_count).sum())
}

/// Expectation of the uplink fraction. Every unit is selected with
/// probability `N_l / L`, so this is `N_l / L` whenever units cover all
/// parameters.
pub fn exact_uplink_fraction(arch: &Architecture, layer_budget: usize) -> Result<f64> {
    let units = arch.units()?;
    check_budget(units.len(), layer_budget)?;
    let total = arch.total_params()?;
    if total == 0 {
        return Err(Error::InvalidArgument("architecture has no parameters".into()));
    }
    let in_units: u64 = units.iter().map(|u| u.param_count).sum();
    Ok(layer_budget as f64 / units.len() as f64 * in_units as f64 / total as f64)
}

fn check_budget(units: usize, budget: usize) -> Result<()> {
    if budget == 0 || budget > units {
        Err(Error::InvalidArgument(format!("layer budget {} outside 1..={}", budget, units)))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficEstimate {
    pub architecture: alloc::string::String,
    pub units: usize,
    pub layer_budget: usize,
    pub clients: usize,
    pub rounds: usize,
    pub trials: usize,
    pub full_model_params: u64,
    pub full_model_bytes: u64,
    /// Mean over trials of (uplink bytes of the run) / (full-model uplink
    /// bytes of the run).
    pub mean_fraction: f64,
    /// Standard deviation of the per-trial fraction.
    pub std_fraction: f64,
    /// Half-width of the 95% normal confidence interval of `mean_fraction`.
    pub ci95_half_width: f64,
    pub exact_fraction: f64,
    /// Mean uplink parameters per round summed over clients.
    pub mean_params_per_round: f64,
}

impl TrafficEstimate {
    pub fn reduction(&self) -> f64 {
        1.0 - self.mean_fraction
    }
}

/// Monte Carlo estimate over `trials` independent runs of `rounds` rounds
/// with `clients` clients, each drawing `layer_budget` units per round.
pub fn estimate_uplink(
    arch: &Architecture,
    layer_budget: usize,
    clients: usize,
    rounds: usize,
    trials: usize,
    seed: u64,
) -> Result<TrafficEstimate> {
    let units = arch.units()?;
    check_budget(units.len(), layer_budget)?;
    if clients == 0 || rounds == 0 || trials == 0 {
        return Err(Error::InvalidArgument("clients, rounds and trials must be positive".into()));
    }
    let total = arch.total_params()?;
    if total == 0 {
        return Err(Error::InvalidArgument("architecture has no parameters".into()));
    }
    let draws = (clients * rounds) as u64;
    let fractions: Vec<f64> = (0..trials)
        .map(|trial| {
            let mut rng = stream_rng(seed, Stream::Traffic, 0, trial as u64);
            let mut params: u64 = 0;
            for _ in 0..draws {
                params += selection_order(units.len(), layer_budget, &mut rng)
                    .into_iter()
                    .map(|u| units[u].param_count)
                    .sum::<u64>();
            }
            params as f64 / (draws * total) as f64
        })
        .collect();
    let n = trials as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = libm::sqrt(var);
    Ok(TrafficEstimate {
        architecture: arch.name.clone(),
        units: units.len(),
        layer_budget,
        clients,
        rounds,
        trials,
        full_model_params: total,
        full_model_bytes: tensor_bytes(total),
        mean_fraction: mean,
        std_fraction: std,
        ci95_half_width: 1.96 * std / libm::sqrt(n),
        exact_fraction: exact_uplink_fraction(arch, layer_budget)?,
        mean_params_per_round: mean * clients as f64 * total as f64,
    })
}

/// Expected fraction of full-model bytes one client uploads per round.
pub fn expected_uplink_fraction(arch: &Architecture, layer_budget: usize, trials: usize, seed: u64) -> Result<f64> {
    Ok(estimate_uplink(arch, layer_budget, 1, 1, trials, seed)?.mean_fraction)
}
