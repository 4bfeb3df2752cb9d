//! Uplink traffic report for `estimate-traffic`.

use std::fmt;

use fedfreeze_core::traffic::{estimate_uplink, TrafficEstimate};
use fedfreeze_core::Architecture;
use serde::Serialize;

use crate::Result;

/// Realised VGG16 uplink per round with 10 clients, in millions of
/// parameters, keyed by layers trained per client.
pub const REALISED_VGG16: [(usize, f64); 4] = [(4, 34.88), (7, 67.92), (10, 101.3), (14, 147.2)];
/// Claimed uplink reductions when training 25% and 50% of VGG16's layers.
pub const CLAIMED_REDUCTION: [(usize, f64); 2] = [(4, 0.75), (7, 0.53)];

#[derive(Debug, Clone, Serialize)]
pub struct PublishedFigures {
    pub realised_params_millions: f64,
    pub full_params_millions: f64,
    pub realised_fraction: f64,
    pub claimed_reduction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrafficReport {
    #[serde(flatten)]
    pub estimate: TrafficEstimate,
    pub reduction: f64,
    pub expected_uplink_bytes_per_round: f64,
    pub full_uplink_bytes_per_round: u64,
    /// Published one-run figures, for VGG16 only.
    pub published: Option<PublishedFigures>,
}

pub fn published_figures(arch: &Architecture, layer_budget: usize) -> Option<PublishedFigures> {
    if arch.name != "vgg16" || arch.num_units().ok()? != 14 {
        return None;
    }
    let full = REALISED_VGG16[3].1;
    let (_, realised) = REALISED_VGG16.iter().find(|(l, _)| *l == layer_budget)?;
    Some(PublishedFigures {
        realised_params_millions: *realised,
        full_params_millions: full,
        realised_fraction: realised / full,
        claimed_reduction: CLAIMED_REDUCTION.iter().find(|(l, _)| *l == layer_budget).map(|(_, r)| *r),
    })
}

pub fn traffic_report(
    arch: &Architecture,
    layer_budget: usize,
    clients: usize,
    rounds: usize,
    trials: usize,
    seed: u64,
) -> Result<TrafficReport> {
    let estimate = estimate_uplink(arch, layer_budget, clients, rounds, trials, seed)?;
    let full = estimate.full_model_bytes * clients as u64;
    Ok(TrafficReport {
        reduction: estimate.reduction(),
        expected_uplink_bytes_per_round: estimate.mean_fraction * full as f64,
        full_uplink_bytes_per_round: full,
        published: published_figures(arch, layer_budget),
        estimate,
    })
}

impl fmt::Display for TrafficReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = &self.estimate;
        writeln!(f, "architecture      {} ({} units, {} parameters)", e.architecture, e.units, e.full_model_params)?;
        writeln!(f, "layers per client {}", e.layer_budget)?;
        writeln!(f, "clients x rounds  {} x {}, {} trials", e.clients, e.rounds, e.trials)?;
        writeln!(
            f,
            "uplink fraction   {:.4} +/- {:.4} (95% CI), exact expectation {:.4}",
            e.mean_fraction, e.ci95_half_width, e.exact_fraction
        )?;
        writeln!(f, "reduction         {:.1}%", 100.0 * self.reduction)?;
        writeln!(
            f,
            "uplink per round  {:.2}M parameters, {:.1} MB (full model: {:.1} MB)",
            e.mean_params_per_round / 1e6,
            self.expected_uplink_bytes_per_round / 1e6,
            self.full_uplink_bytes_per_round as f64 / 1e6
        )?;
        if let Some(p) = &self.published {
            writeln!(
                f,
                "published run     {:.2}M of {:.1}M parameters per round = {:.1}% (one realised selection history)",
                p.realised_params_millions,
                p.full_params_millions,
                100.0 * p.realised_fraction
            )?;
            if let Some(r) = p.claimed_reduction {
                writeln!(f, "published claim   around {:.0}% reduction", 100.0 * r)?;
            }
        }
        Ok(())
    }
}
