use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{self, BatchNormCache, ChannelDims, ConvDims, DenseDims, PoolDims};
use super::{FreezeMask, GradientSet, OptimizerState};
use crate::arch::{Architecture, LayerSpec, Padding, Unit};
use crate::metrics::{cross_entropy_labels, PROBABILITY_FLOOR};
use crate::{Error, Result, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Layer-indexed parameters of a sequential network together with the
/// architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    units: Vec<Unit>,
    unit_of_layer: Vec<Option<usize>>,
    params: Vec<Vec<Tensor<S>>>,
}

enum Cache<S> {
    None,
    BatchNorm(BatchNormCache<S>),
    MaxPool(Vec<usize>),
}

/// Activations recorded by [`Model::forward_train`] for the backward pass.
pub struct Trace<S> {
    activations: Vec<Tensor<S>>,
    caches: Vec<Cache<S>>,
    mask: FreezeMask,
}

impl<S: Scalar> Trace<S> {
    /// Model output (class probabilities when the last layer is softmax).
    pub fn output(&self) -> &Tensor<S> {
        self.activations.last().expect("trace always holds the input")
    }

    /// Input batch followed by the output of every layer.
    pub fn activations(&self) -> &[Tensor<S>] {
        &self.activations
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

impl<S: Scalar> Model<S> {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let shapes = arch.shapes()?;
        let params = arch
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, input)| {
                let pshapes = layer.param_shapes(input);
                match *layer {
                    LayerSpec::Dense { units } => {
                        let limit = libm::sqrt(6.0 / (input[0] + units) as f64);
                        vec![glorot(&pshapes[0], limit, rng), Tensor::zeros(&pshapes[1])]
                    }
                    LayerSpec::Conv2d { filters, kernel, .. } => {
                        let kk = kernel * kernel;
                        let limit = libm::sqrt(6.0 / ((input[0] + filters) * kk) as f64);
                        vec![glorot(&pshapes[0], limit, rng), Tensor::zeros(&pshapes[1])]
                    }
                    LayerSpec::BatchNorm => vec![
                        Tensor::filled(&pshapes[0], S::one()),
                        Tensor::zeros(&pshapes[1]),
                        Tensor::zeros(&pshapes[2]),
                        Tensor::filled(&pshapes[3], S::one()),
                    ],
                    _ => Vec::new(),
                }
            })
            .collect();
        Self::assemble(arch, shapes, params)
    }

    pub fn from_params(arch: Architecture, params: Vec<Vec<Tensor<S>>>) -> Result<Self> {
        let shapes = arch.shapes()?;
        if params.len() != arch.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (layer, group)) in arch.layers.iter().zip(&params).enumerate() {
            check_group(i, &layer.param_shapes(&shapes[i]), group)?;
        }
        Self::assemble(arch, shapes, params)
    }

    fn assemble(arch: Architecture, shapes: Vec<Vec<usize>>, params: Vec<Vec<Tensor<S>>>) -> Result<Self> {
        let units = arch.units()?;
        let mut unit_of_layer = vec![None; arch.layers.len()];
        for (u, unit) in units.iter().enumerate() {
            for &l in &unit.layers {
                unit_of_layer[l] = Some(u);
            }
        }
        Ok(Self { arch, shapes, units, unit_of_layer, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_of_layer(&self, layer: usize) -> Option<usize> {
        self.unit_of_layer.get(layer).copied().flatten()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn params(&self) -> &[Vec<Tensor<S>>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> &[Tensor<S>] {
        &self.params[layer]
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [Tensor<S>] {
        &mut self.params[layer]
    }

    /// Replaces one layer's parameters, checking their shapes.
    pub fn set_layer_params(&mut self, layer: usize, group: Vec<Tensor<S>>) -> Result<()> {
        let Some(spec) = self.arch.layers.get(layer) else {
            return Err(Error::Shape(format!("layer {} out of range", layer)));
        };
        check_group(layer, &spec.param_shapes(&self.shapes[layer]), &group)?;
        self.params[layer] = group;
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().flatten().map(|t| t.len() as u64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            units: self.units.clone(),
            unit_of_layer: self.unit_of_layer.clone(),
            params: self.params.iter().map(|g| g.iter().map(Tensor::cast).collect()).collect(),
        }
    }

    /// Parameterized layers belonging to units in `mask`, ascending.
    pub fn masked_layers(&self, mask: &FreezeMask) -> Vec<usize> {
        let mut layers: Vec<usize> = mask.iter().flat_map(|u| self.units[u].layers.iter().copied()).collect();
        layers.sort_unstable();
        layers
    }

    fn trained(&self, mask: &FreezeMask, layer: usize) -> bool {
        self.unit_of_layer[layer].is_some_and(|u| mask.contains(u))
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.shapes[0].len() + 1 || shape[1..] != self.shapes[0][..] || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match [batch, {:?}]",
                shape, self.shapes[0]
            )));
        }
        Ok(shape[0])
    }

    /// Inference pass; batch norm uses running statistics.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut trace = self.run_forward(batch, &FreezeMask::empty(), false)?;
        Ok(trace.activations.pop().expect("non-empty"))
    }

    /// Training pass. Batch norm layers in `mask` normalise with batch
    /// statistics; frozen ones use their running statistics.
    pub fn forward_train(&self, batch: &Tensor<S>, mask: &FreezeMask) -> Result<Trace<S>> {
        mask.validate(self.num_units())?;
        self.run_forward(batch, mask, true)
    }

    fn run_forward(&self, batch: &Tensor<S>, mask: &FreezeMask, training: bool) -> Result<Trace<S>> {
        let n = self.check_batch(batch)?;
        batch.ensure_finite("input batch")?;
        let mut activations = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        activations.push(batch.clone());
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let x = activations[i].data();
            let input = &self.shapes[i];
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&self.shapes[i + 1]);
            let p = &self.params[i];
            let (y, cache) = match *layer {
                LayerSpec::Dense { units } => {
                    let d = DenseDims { batch: n, inputs: input[0], outputs: units };
                    (layers::dense_forward(&d, x, p[0].data(), p[1].data()), Cache::None)
                }
                LayerSpec::Conv2d { .. } => {
                    let d = self.conv_dims(i, n);
                    (layers::conv_forward(&d, x, p[0].data(), p[1].data()), Cache::None)
                }
                LayerSpec::BatchNorm => {
                    let d = channel_dims(input, n);
                    let stats = if training && self.trained(mask, i) {
                        None
                    } else {
                        Some((p[2].data(), p[3].data()))
                    };
                    let (y, c) = layers::batch_norm_forward(
                        &d,
                        x,
                        p[0].data(),
                        p[1].data(),
                        stats,
                        S::from_f64(BN_EPSILON),
                    );
                    (y, Cache::BatchNorm(c))
                }
                LayerSpec::MaxPool { size } => {
                    let d = pool_dims(input, n, size);
                    let (y, arg) = layers::max_pool_forward(&d, x);
                    (y, Cache::MaxPool(arg))
                }
                LayerSpec::AvgPool { size } => {
                    (layers::avg_pool_forward(&pool_dims(input, n, size), x), Cache::None)
                }
                LayerSpec::Flatten => (x.to_vec(), Cache::None),
                LayerSpec::Relu => (x.iter().map(|&v| v.max(S::zero())).collect(), Cache::None),
                LayerSpec::Softmax => (layers::softmax_forward(n, input[0], x), Cache::None),
            };
            let y = Tensor::from_vec(&out_shape, y)?;
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("activation of layer {} ({})", i, layer.name())));
            }
            activations.push(y);
            caches.push(cache);
        }
        Ok(Trace { activations, caches, mask: mask.clone() })
    }

    /// Mean cross-entropy of the trace output against integer labels.
    pub fn trace_loss(&self, trace: &Trace<S>, labels: &[usize]) -> Result<f64> {
        cross_entropy_labels(labels, trace.output())
    }

    /// Parameter gradients of the mean cross-entropy for the layers in the
    /// trace's mask. Backpropagation stops at the lowest trained layer.
    pub fn backward(&self, trace: &Trace<S>, labels: &[usize]) -> Result<GradientSet<S>> {
        Ok(self.run_backward(trace, labels, false)?.0)
    }

    /// Like [`Model::backward`] but propagates all the way to the input and
    /// also returns the gradient with respect to the batch.
    pub fn backward_with_input_grad(
        &self,
        trace: &Trace<S>,
        labels: &[usize],
    ) -> Result<(GradientSet<S>, Tensor<S>)> {
        let (grads, dx) = self.run_backward(trace, labels, true)?;
        Ok((grads, dx.expect("input gradient requested")))
    }

    fn run_backward(
        &self,
        trace: &Trace<S>,
        labels: &[usize],
        want_input: bool,
    ) -> Result<(GradientSet<S>, Option<Tensor<S>>)> {
        let mask = &trace.mask;
        let n = trace.batch_size();
        let probs = trace.output();
        let classes = self.num_classes();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!("label {} out of range for {} classes", bad, classes)));
        }
        let mut grads = GradientSet::default();
        let lowest = if want_input {
            0
        } else {
            match self.masked_layers(mask).first() {
                Some(&l) => l,
                None => return Ok((grads, None)),
            }
        };
        let inv_n = S::from_f64(1.0 / n as f64);
        let last = self.arch.layers.len();
        // Softmax followed by cross-entropy collapses to (p - y) / n.
        let (mut dy, top) = if matches!(self.arch.layers.last(), Some(LayerSpec::Softmax)) {
            let mut d = probs.data().to_vec();
            for (r, &l) in labels.iter().enumerate() {
                d[r * classes + l] = d[r * classes + l] - S::one();
            }
            d.iter_mut().for_each(|v| *v = *v * inv_n);
            (d, last - 1)
        } else {
            let floor = S::from_f64(PROBABILITY_FLOOR);
            let mut d = vec![S::zero(); probs.len()];
            for (r, &l) in labels.iter().enumerate() {
                let p = probs.data()[r * classes + l].max(floor);
                d[r * classes + l] = -inv_n / p;
            }
            (d, last)
        };

        for i in (lowest..top).rev() {
            let layer = &self.arch.layers[i];
            let input = &self.shapes[i];
            let x = trace.activations[i].data();
            let p = &self.params[i];
            let trained = self.trained(mask, i);
            let need_dx = i > lowest || want_input;
            let (dx, pg) = match (layer, &trace.caches[i]) {
                (LayerSpec::Dense { units }, _) => {
                    let d = DenseDims { batch: n, inputs: input[0], outputs: *units };
                    layers::dense_backward(&d, x, p[0].data(), &dy, trained, need_dx)
                }
                (LayerSpec::Conv2d { .. }, _) => {
                    let d = self.conv_dims(i, n);
                    layers::conv_backward(&d, x, p[0].data(), &dy, trained, need_dx)
                }
                (LayerSpec::BatchNorm, Cache::BatchNorm(c)) => {
                    let d = channel_dims(input, n);
                    layers::batch_norm_backward(&d, c, p[0].data(), &dy, trained, need_dx)
                }
                (LayerSpec::MaxPool { .. }, Cache::MaxPool(arg)) => {
                    (Some(layers::max_pool_backward(x.len(), arg, &dy)), None)
                }
                (LayerSpec::AvgPool { size }, _) => {
                    (Some(layers::avg_pool_backward(&pool_dims(input, n, *size), &dy)), None)
                }
                (LayerSpec::Flatten, _) => (Some(dy.clone()), None),
                (LayerSpec::Relu, _) => {
                    let dx = x.iter().zip(&dy).map(|(&xi, &g)| if xi > S::zero() { g } else { S::zero() });
                    (Some(dx.collect()), None)
                }
                (LayerSpec::Softmax, _) => {
                    let out = trace.activations[i + 1].data();
                    (Some(layers::softmax_backward(n, input[0], out, &dy)), None)
                }
                _ => unreachable!("cache kind always matches layer kind"),
            };
            if let Some((a, b)) = pg {
                let pshapes = layer.param_shapes(input);
                let group = vec![Tensor::from_vec(&pshapes[0], a)?, Tensor::from_vec(&pshapes[1], b)?];
                if !group.iter().all(Tensor::is_finite) {
                    return Err(Error::NonFinite(format!("gradient of layer {}", i)));
                }
                grads.insert(i, group);
            }
            if let Some(dx) = dx {
                dy = dx;
            }
        }
        let input_grad = if want_input {
            let t = Tensor::from_vec(trace.activations[0].shape(), dy)?;
            t.ensure_finite("input gradient")?;
            Some(t)
        } else {
            None
        };
        Ok((grads, input_grad))
    }

    /// Moves running statistics of trained batch-norm layers towards the
    /// batch statistics recorded in `trace`.
    pub fn update_running_stats(&mut self, trace: &Trace<S>) {
        let momentum = S::from_f64(BN_MOMENTUM);
        let rest = S::one() - momentum;
        for i in self.masked_layers(&trace.mask) {
            if let Cache::BatchNorm(c) = &trace.caches[i] {
                if !c.uses_batch_stats {
                    continue;
                }
                let (mean, var) = self.params[i].split_at_mut(3);
                for (rm, bm) in mean[2].data_mut().iter_mut().zip(&c.batch_mean) {
                    *rm = momentum * *rm + rest * *bm;
                }
                for (rv, bv) in var[0].data_mut().iter_mut().zip(&c.batch_var) {
                    *rv = momentum * *rv + rest * *bv;
                }
            }
        }
    }

    /// One optimisation step on a mini-batch. Returns the batch loss
    /// measured before the update.
    pub fn train_step(
        &mut self,
        batch: &Tensor<S>,
        labels: &[usize],
        mask: &FreezeMask,
        opt: &mut OptimizerState<S>,
    ) -> Result<f64> {
        let trace = self.forward_train(batch, mask)?;
        let loss = self.trace_loss(&trace, labels)?;
        let grads = self.backward(&trace, labels)?;
        opt.step(self, &grads, mask)?;
        self.update_running_stats(&trace);
        Ok(loss)
    }

    fn conv_dims(&self, layer: usize, batch: usize) -> ConvDims {
        let LayerSpec::Conv2d { kernel, stride, padding, .. } = self.arch.layers[layer] else {
            unreachable!("conv_dims on a non-conv layer")
        };
        let input = &self.shapes[layer];
        let output = &self.shapes[layer + 1];
        ConvDims {
            batch,
            in_channels: input[0],
            height: input[1],
            width: input[2],
            out_channels: output[0],
            out_height: output[1],
            out_width: output[2],
            kernel,
            stride,
            pad: if padding == Padding::Same { (kernel - 1) / 2 } else { 0 },
        }
    }
}

fn channel_dims(input: &[usize], batch: usize) -> ChannelDims {
    ChannelDims { batch, channels: input[0], inner: input[1..].iter().product() }
}

fn pool_dims(input: &[usize], batch: usize, size: usize) -> PoolDims {
    PoolDims { planes: batch * input[0], height: input[1], width: input[2], size }
}

fn glorot<S: Scalar, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<S> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| S::from_f64(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn check_group<S: Scalar>(layer: usize, expected: &[Vec<usize>], group: &[Tensor<S>]) -> Result<()> {
    let ok = expected.len() == group.len() && expected.iter().zip(group).all(|(e, t)| t.shape() == &e[..]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "layer {} expects parameter shapes {:?}, got {:?}",
            layer,
            expected,
            group.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
        )))
    }
}
