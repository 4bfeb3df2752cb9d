#![allow(dead_code)]

use fedfreeze_core::arch::Padding;
use fedfreeze_core::seed::{stream_rng, Stream};
use fedfreeze_core::{Architecture, LayerSpec, Model, Tensor};
use rand::Rng;

pub fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

pub fn conv(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d { filters, kernel, stride: 1, padding: Padding::Same }
}

pub fn vgg16() -> Architecture {
    use LayerSpec::*;
    let mut layers = Vec::new();
    let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    for (filters, convs) in blocks {
        for _ in 0..convs {
            layers.extend([conv(filters, 3), BatchNorm, Relu]);
        }
        layers.push(MaxPool { size: 2 });
    }
    layers.extend([AvgPool { size: 1 }, Flatten, dense(10), Softmax]);
    Architecture::new("vgg16", vec![3, 32, 32], layers)
}

/// Six dense units, the network used for the convergence runs.
pub fn toy_mlp(inputs: usize, classes: usize) -> Architecture {
    use LayerSpec::*;
    let mut layers = Vec::new();
    for units in [32, 32, 32, 16, 16] {
        layers.extend([dense(units), Relu]);
    }
    layers.extend([dense(classes), Softmax]);
    Architecture::new("toy_mlp", vec![inputs], layers)
}

pub fn mlp(sizes: &[usize]) -> Architecture {
    let mut layers = Vec::new();
    for (i, &s) in sizes[1..].iter().enumerate() {
        layers.push(dense(s));
        layers.push(if i + 2 == sizes.len() { LayerSpec::Softmax } else { LayerSpec::Relu });
    }
    Architecture::new("mlp", vec![sizes[0]], layers)
}

pub fn init<S: fedfreeze_core::Scalar>(arch: Architecture, seed: u64) -> Model<S> {
    Model::new(arch, &mut stream_rng(seed, Stream::ModelInit, 0, 0)).unwrap()
}

pub fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, Stream::Dataset, 9, 9);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Dataset, 8, 8);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Bit patterns of every parameter, for exact comparisons.
pub fn bits(model: &Model<f64>, layer: usize) -> Vec<u64> {
    model.layer_params(layer).iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
