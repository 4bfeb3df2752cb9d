//! Accuracy, categorical cross-entropy, and layer-selection statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, FreezeMask, Result, Scalar, Tensor};

/// Probabilities are clamped to `[PROBABILITY_FLOOR, 1]` before the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Binary confusion counts. For multiclass problems they are summed over
/// one-vs-rest splits, so the four counts add up to `classes * samples`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Micro-summed one-vs-rest counts of `predictions` against `labels`.
    pub fn one_vs_rest(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut counts = Self::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= classes || p >= classes {
                return Err(Error::Shape(format!("class index out of range for {} classes", classes)));
            }
            if y == p {
                counts.tp += 1;
                counts.tn += classes as u64 - 1;
            } else {
                counts.fp += 1;
                counts.fn_ += 1;
                counts.tn += classes as u64 - 2;
            }
        }
        Ok(counts)
    }

    /// `TP / (TP + FN)` over the micro-summed counts. For single-label
    /// multiclass data this is the top-1 match rate, in percent.
    pub fn micro_accuracy(&self) -> Result<f64> {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            return Err(Error::InvalidArgument("no positive samples".into()));
        }
        Ok(100.0 * self.tp as f64 / denom as f64)
    }
}

/// `(TP + TN) / (TP + TN + FN + FP) * 100`.
pub fn accuracy(counts: &ConfusionCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy of zero samples".into()));
    }
    Ok(100.0 * (counts.tp + counts.tn) as f64 / total as f64)
}

/// Index of the largest entry in each row (first one on ties).
pub fn argmax_rows<S: Scalar>(probs: &Tensor<S>) -> Vec<usize> {
    let rows = probs.rows();
    if rows == 0 {
        return Vec::new();
    }
    let cols = probs.len() / rows;
    probs
        .data()
        .chunks(cols)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Top-1 match rate in percent.
pub fn top1_accuracy<S: Scalar>(labels: &[usize], probs: &Tensor<S>) -> Result<f64> {
    if labels.is_empty() || labels.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let hits = argmax_rows(probs).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean per-sample categorical cross-entropy `-sum_i y_i log(yhat_i)` for
/// one-hot targets.
pub fn cross_entropy<S: Scalar>(targets: &Tensor<S>, probs: &Tensor<S>) -> Result<f64> {
    if targets.shape() != probs.shape() || probs.shape().len() != 2 || probs.rows() == 0 {
        return Err(Error::Shape(format!(
            "targets {:?} and predictions {:?} must be equal [batch, classes] shapes",
            targets.shape(),
            probs.shape()
        )));
    }
    let cols = probs.shape()[1];
    let mut total = 0.0;
    for (y, p) in targets.data().chunks(cols).zip(probs.data().chunks(cols)) {
        let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
        if libm::fabs(sum - 1.0) > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("prediction row sums to {}", sum)));
        }
        for (yi, pi) in y.iter().zip(p) {
            let yi = yi.as_f64();
            if yi != 0.0 {
                total -= yi * libm::log(pi.as_f64().clamp(PROBABILITY_FLOOR, 1.0));
            }
        }
    }
    Ok(total / probs.rows() as f64)
}

/// Cross-entropy with integer class labels in place of one-hot rows.
pub fn cross_entropy_labels<S: Scalar>(labels: &[usize], probs: &Tensor<S>) -> Result<f64> {
    let rows = probs.rows();
    if labels.len() != rows || rows == 0 {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), rows)));
    }
    let cols = probs.len() / rows;
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(Error::Shape(format!("label {} out of range for {} classes", l, cols)));
        }
        total -= libm::log(probs.data()[r * cols + l].as_f64().clamp(PROBABILITY_FLOOR, 1.0));
    }
    Ok(total / rows as f64)
}

pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = S::one();
    }
    t
}

/// How often each client trained each unit over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    clients: usize,
    units: usize,
    layers_per_draw: usize,
    counts: Vec<u64>,
    draws: Vec<u64>,
}

impl SelectionHistogram {
    pub fn new(clients: usize, units: usize, layers_per_draw: usize) -> Self {
        Self { clients, units, layers_per_draw, counts: vec![0; clients * units], draws: vec![0; clients] }
    }

    pub fn record(&mut self, client: usize, mask: &FreezeMask) -> Result<()> {
        if client >= self.clients {
            return Err(Error::InvalidArgument(format!("client {} out of range", client)));
        }
        mask.validate(self.units)?;
        if mask.len() != self.layers_per_draw {
            return Err(Error::Mask(format!(
                "mask selects {} units, histogram expects {}",
                mask.len(),
                self.layers_per_draw
            )));
        }
        for u in mask.iter() {
            self.counts[client * self.units + u] += 1;
        }
        self.draws[client] += 1;
        Ok(())
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn layers_per_draw(&self) -> usize {
        self.layers_per_draw
    }

    pub fn count(&self, client: usize, unit: usize) -> u64 {
        self.counts[client * self.units + unit]
    }

    pub fn client_row(&self, client: usize) -> &[u64] {
        &self.counts[client * self.units..(client + 1) * self.units]
    }

    /// Rounds in which `client` trained.
    pub fn draws(&self, client: usize) -> u64 {
        self.draws[client]
    }

    pub fn unit_totals(&self) -> Vec<u64> {
        (0..self.units).map(|u| (0..self.clients).map(|c| self.count(c, u)).sum()).collect()
    }

    pub fn total_draws(&self) -> u64 {
        self.draws.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionUniformity {
    /// `N_l / L`.
    pub expected_frequency: f64,
    /// Fraction of all draws in which each unit was selected.
    pub frequencies: Vec<f64>,
    pub max_abs_deviation: f64,
    /// Largest per-client deviation from the expected frequency.
    pub max_client_deviation: f64,
    /// Pearson statistic over unit totals, scaled for draws without
    /// replacement so it is asymptotically chi-square with `L - 1` degrees
    /// of freedom.
    pub chi_square_stat: f64,
    pub degrees_of_freedom: usize,
}

pub fn selection_uniformity(hist: &SelectionHistogram) -> Result<SelectionUniformity> {
    let n = hist.total_draws();
    if n == 0 || hist.units == 0 {
        return Err(Error::InvalidArgument("empty selection histogram".into()));
    }
    let l = hist.units as f64;
    let p = hist.layers_per_draw as f64 / l;
    let totals = hist.unit_totals();
    let frequencies: Vec<f64> = totals.iter().map(|&c| c as f64 / n as f64).collect();
    let max_abs_deviation = frequencies.iter().map(|f| libm::fabs(f - p)).fold(0.0, f64::max);
    let max_client_deviation = (0..hist.clients)
        .filter(|&c| hist.draws[c] > 0)
        .flat_map(|c| {
            let d = hist.draws[c] as f64;
            hist.client_row(c).iter().map(move |&k| libm::fabs(k as f64 / d - p))
        })
        .fold(0.0, f64::max);
    // Each draw picks N_l distinct units: per-unit variance is n p (1 - p)
    // and the pairwise covariance -n p (1 - p) / (L - 1).
    let chi_square_stat = if p >= 1.0 || hist.units < 2 {
        0.0
    } else {
        let expected = n as f64 * p;
        let var = expected * (1.0 - p);
        let raw: f64 = totals.iter().map(|&c| (c as f64 - expected) * (c as f64 - expected) / var).sum();
        raw * (l - 1.0) / l
    };
    Ok(SelectionUniformity {
        expected_frequency: p,
        frequencies,
        max_abs_deviation,
        max_client_deviation,
        chi_square_stat,
        degrees_of_freedom: hist.units.saturating_sub(1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: u32,
    pub samples: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub trained_units: Vec<usize>,
}

/// Per-round record. Byte fields hold raw tensor bytes; framing and
/// encoding overhead is kept in the `*_header_bytes` fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub clients: Vec<ClientMetrics>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub uplink_header_bytes: u64,
    pub downlink_header_bytes: u64,
    pub selection_counts: Vec<u64>,
    pub wall_time_ms: f64,
}
