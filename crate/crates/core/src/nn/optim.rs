use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{FreezeMask, GradientSet, Model};
use crate::{Error, Result, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer hyperparameters plus lazily created Adam moments, keyed by
/// layer index.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    kind: OptimizerKind,
    learning_rate: S,
    step: u64,
    moments: BTreeMap<usize, Vec<(Tensor<S>, Tensor<S>)>>,
}

impl<S: Scalar> OptimizerState<S> {
    /// A zero learning rate is allowed and makes every step a no-op on the
    /// weights.
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                learning_rate
            )));
        }
        Ok(Self { kind, learning_rate: S::from_f64(learning_rate), step: 0, moments: BTreeMap::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moments `(m, v)` of a layer's trainable tensors, if Adam has touched it.
    pub fn moments(&self, layer: usize) -> Option<&[(Tensor<S>, Tensor<S>)]> {
        self.moments.get(&layer).map(Vec::as_slice)
    }

    /// Applies `grads` to the layers of `mask`. The gradient set must cover
    /// exactly the parameterized layers of the masked units.
    pub fn step(&mut self, model: &mut Model<S>, grads: &GradientSet<S>, mask: &FreezeMask) -> Result<()> {
        mask.validate(model.num_units())?;
        let expected = model.masked_layers(mask);
        let got: Vec<usize> = grads.layers().collect();
        if expected != got {
            return Err(Error::Mask(format!(
                "gradients for layers {:?} do not match masked layers {:?}",
                got, expected
            )));
        }
        if expected.is_empty() {
            return Ok(());
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, g) in grads.iter() {
                    let params = model.layer_params_mut(layer);
                    for (p, g) in params.iter_mut().zip(g) {
                        check_shape(layer, p, g)?;
                        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w = *w - lr * *d;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = S::from_f64(ADAM_BETA1);
                let b2 = S::from_f64(ADAM_BETA2);
                let eps = S::from_f64(ADAM_EPSILON);
                let t = self.step as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                for (layer, g) in grads.iter() {
                    let params = model.layer_params_mut(layer);
                    let moments = self.moments.entry(layer).or_insert_with(|| {
                        g.iter().map(|t| (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))).collect()
                    });
                    for ((p, g), (m, v)) in params.iter_mut().zip(g).zip(moments.iter_mut()) {
                        check_shape(layer, p, g)?;
                        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                        for ((w, &d), (m, v)) in it {
                            *m = b1 * *m + (S::one() - b1) * d;
                            *v = b2 * *v + (S::one() - b2) * d * d;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shape<S: Scalar>(layer: usize, p: &Tensor<S>, g: &Tensor<S>) -> Result<()> {
    if p.shape() == g.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "layer {}: gradient shape {:?} does not match parameter {:?}",
            layer,
            g.shape(),
            p.shape()
        )))
    }
}
