//! Client side of a round: pick units, train them locally, report them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::tensor_bytes;
use crate::data::Dataset;
use crate::metrics::{cross_entropy_labels, top1_accuracy};
use crate::seed::{stream_rng, Stream};
use crate::selection::select_layers;
use crate::{Error, FreezeMask, Model, OptimizerKind, OptimizerState, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BatchOrder {
    /// Reshuffle the partition at the start of every local epoch.
    #[default]
    Shuffled,
    /// Use the partition's row order.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub client_id: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Number of trainable units to train each round.
    pub layer_budget: usize,
    /// Run seed; per-round streams are derived from it and the client id.
    pub seed: u64,
    pub batch_order: BatchOrder,
}

impl ClientConfig {
    /// One local epoch, batch size 32, Adam with learning rate 0.01.
    pub fn new(client_id: u32, layer_budget: usize, seed: u64) -> Self {
        Self {
            client_id,
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            layer_budget,
            seed,
            batch_order: BatchOrder::Shuffled,
        }
    }
}

/// Result of one client round: the trained units' parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialUpdate<S> {
    pub round: u32,
    pub client_id: u32,
    pub trained: FreezeMask,
    /// Parameters of every layer in the trained units, keyed by layer index.
    pub layers: BTreeMap<usize, Vec<Tensor<S>>>,
    pub sample_count: u64,
    pub loss: f64,
    pub accuracy: f64,
}

impl<S: Scalar> PartialUpdate<S> {
    pub fn param_count(&self) -> u64 {
        self.layers.values().flatten().map(|t| t.len() as u64).sum()
    }

    /// Raw tensor bytes this update puts on the wire.
    pub fn tensor_bytes(&self) -> u64 {
        tensor_bytes(self.param_count())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().flatten().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

/// Inference-mode loss and accuracy over a dataset, in chunks of
/// `chunk` rows.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset, chunk: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyPartition("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut hits = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = data.batch::<S>(part);
        let probs = model.forward(&x)?;
        loss_sum += cross_entropy_labels(&y, &probs)? * part.len() as f64;
        hits += top1_accuracy(&y, &probs)? / 100.0 * part.len() as f64;
    }
    let n = data.len() as f64;
    Ok(Evaluation { loss: loss_sum / n, accuracy: 100.0 * hits / n })
}

pub const EVAL_CHUNK: usize = 1024;

/// Trains `layer_budget` randomly chosen units of a copy of `global` on
/// `partition` and returns their new parameters.
pub fn client_update<S: Scalar>(
    cfg: &ClientConfig,
    partition: &Dataset,
    global: &Model<S>,
    round: u32,
) -> Result<PartialUpdate<S>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "epochs ({}) and batch size ({}) must be positive",
            cfg.epochs, cfg.batch_size
        )));
    }
    if partition.is_empty() {
        return Err(Error::EmptyPartition(format!("client {} has no samples", cfg.client_id)));
    }
    if !global.is_finite() {
        return Err(Error::NonFinite("received global model".into()));
    }
    let client = u64::from(cfg.client_id);
    let mask = select_layers(
        global.num_units(),
        cfg.layer_budget,
        &mut stream_rng(cfg.seed, Stream::LayerSelection, client, u64::from(round)),
    )?;
    let mut local = global.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..partition.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::BatchShuffle, client, u64::from(round));
    let diverged = |loss: f64| Error::Divergence { client: cfg.client_id, round, loss };
    for _ in 0..cfg.epochs {
        if cfg.batch_order == BatchOrder::Shuffled {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = partition.batch::<S>(chunk);
            let loss = match local.train_step(&x, &y, &mask, &mut opt) {
                Ok(loss) => loss,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
        }
    }
    let eval = match evaluate(&local, partition, EVAL_CHUNK) {
        Ok(e) => e,
        Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
        Err(e) => return Err(e),
    };
    if !eval.loss.is_finite() {
        return Err(diverged(eval.loss));
    }
    let layers: BTreeMap<usize, Vec<Tensor<S>>> =
        local.masked_layers(&mask).into_iter().map(|l| (l, local.layer_params(l).to_vec())).collect();
    let update = PartialUpdate {
        round,
        client_id: cfg.client_id,
        trained: mask,
        layers,
        sample_count: partition.len() as u64,
        loss: eval.loss,
        accuracy: eval.accuracy,
    };
    if !update.is_finite() {
        return Err(diverged(eval.loss));
    }
    Ok(update)
}
