mod common;

use common::*;
use fedfreeze_core::arch::Padding;
use fedfreeze_core::{Architecture, FreezeMask, LayerSpec, Model, Tensor};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored so that
/// gradients which are zero up to rounding compare by absolute error.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Which side of every ReLU and max-pool decision each activation falls on.
/// Central differences are only meaningful when a perturbation keeps this
/// pattern unchanged.
fn kink_pattern(model: &Model<f64>, acts: &[Tensor<f64>]) -> Vec<usize> {
    let mut pattern = Vec::new();
    for (i, layer) in model.arch().layers.iter().enumerate() {
        let x = acts[i].data();
        match *layer {
            LayerSpec::Relu => pattern.extend(x.iter().map(|&v| usize::from(v > 0.0))),
            LayerSpec::MaxPool { size } => {
                let shape = acts[i].shape();
                let (h, w) = (shape[2], shape[3]);
                for plane in x.chunks(h * w) {
                    for oy in 0..h / size {
                        for ox in 0..w / size {
                            let window = (0..size * size).map(|k| plane[(oy * size + k / size) * w + ox * size + k % size]);
                            let best = window.enumerate().fold((0, f64::NEG_INFINITY), |b, (k, v)| if v > b.1 { (k, v) } else { b });
                            pattern.push(best.0);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

fn loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], mask: &FreezeMask) -> (f64, Vec<usize>) {
    let trace = model.forward_train(x, mask).unwrap();
    (model.trace_loss(&trace, labels).unwrap(), kink_pattern(model, trace.activations()))
}

struct Report {
    checked: usize,
    skipped: usize,
    worst: f64,
}

impl Report {
    fn new() -> Self {
        Report { checked: 0, skipped: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: f64, up: (f64, Vec<usize>), down: (f64, Vec<usize>), base: &[usize]) {
        if up.1 != base || down.1 != base {
            self.skipped += 1;
            return;
        }
        self.worst = self.worst.max(relative_error(analytic, (up.0 - down.0) / (2.0 * STEP)));
        self.checked += 1;
    }

    fn assert_ok(&self, min_checked: usize) {
        assert!(self.checked >= min_checked, "only {} parameters checked", self.checked);
        assert!(self.skipped * 10 <= self.checked, "{} of {} straddled a kink", self.skipped, self.checked);
        assert!(self.worst < TOLERANCE, "max relative error {}", self.worst);
    }
}

/// Compares every gradient-trainable parameter of the masked layers with
/// central differences.
fn check(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], mask: &FreezeMask) -> Report {
    let trace = model.forward_train(x, mask).unwrap();
    let base = kink_pattern(model, trace.activations());
    let grads = model.backward(&trace, labels).unwrap();
    let mut probe = model.clone();
    let mut report = Report::new();
    for layer in model.masked_layers(mask) {
        let g = grads.get(layer).unwrap();
        for (t, gt) in g.iter().enumerate() {
            for i in 0..gt.len() {
                let orig = probe.layer_params(layer)[t].data()[i];
                probe.layer_params_mut(layer)[t].data_mut()[i] = orig + STEP;
                let up = loss(&probe, x, labels, mask);
                probe.layer_params_mut(layer)[t].data_mut()[i] = orig - STEP;
                let down = loss(&probe, x, labels, mask);
                probe.layer_params_mut(layer)[t].data_mut()[i] = orig;
                report.add(gt.data()[i], up, down, &base);
            }
        }
    }
    report
}

fn check_input(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], mask: &FreezeMask) -> Report {
    let trace = model.forward_train(x, mask).unwrap();
    let base = kink_pattern(model, trace.activations());
    let (_, dx) = model.backward_with_input_grad(&trace, labels).unwrap();
    let mut probe = x.clone();
    let mut report = Report::new();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = loss(model, &probe, labels, mask);
        probe.data_mut()[i] = orig - STEP;
        let down = loss(model, &probe, labels, mask);
        probe.data_mut()[i] = orig;
        report.add(dx.data()[i], up, down, &base);
    }
    report
}

fn cnn() -> Architecture {
    use LayerSpec::*;
    Architecture::new(
        "cnn",
        vec![3, 8, 8],
        vec![
            conv(4, 3),
            BatchNorm,
            Relu,
            MaxPool { size: 2 },
            conv(6, 3),
            BatchNorm,
            Relu,
            AvgPool { size: 2 },
            Flatten,
            dense(5),
            Softmax,
        ],
    )
}

fn strided() -> Architecture {
    use LayerSpec::*;
    Architecture::new(
        "strided",
        vec![2, 9, 9],
        vec![
            Conv2d { filters: 5, kernel: 3, stride: 2, padding: Padding::Valid },
            Relu,
            Conv2d { filters: 4, kernel: 1, stride: 1, padding: Padding::Same },
            Flatten,
            BatchNorm,
            dense(6),
            Relu,
            dense(3),
            Softmax,
        ],
    )
}

#[test]
fn conv_batchnorm_pool_stack() {
    let model: Model<f64> = init(cnn(), 11);
    let x = random_batch(&[4, 3, 8, 8], 11);
    let labels = random_labels(4, 5, 11);
    check(&model, &x, &labels, &FreezeMask::all(3)).assert_ok(450);
    check_input(&model, &x, &labels, &FreezeMask::all(3)).assert_ok(700);
}

#[test]
fn strided_valid_conv_and_flat_batchnorm() {
    let model: Model<f64> = init(strided(), 12);
    let x = random_batch(&[5, 2, 9, 9], 12);
    let labels = random_labels(5, 3, 12);
    let mask = FreezeMask::all(model.num_units());
    check(&model, &x, &labels, &mask).assert_ok(300);
}

#[test]
fn three_layer_mlp() {
    let model: Model<f64> = init(mlp(&[10, 16, 12, 4]), 13);
    let x = random_batch(&[6, 10], 13);
    let labels = random_labels(6, 4, 13);
    let report = check(&model, &x, &labels, &FreezeMask::all(3));
    assert_eq!(report.checked + report.skipped, 176 + 204 + 52);
    report.assert_ok(400);
}

#[test]
fn trained_layers_below_frozen_ones_get_exact_gradients() {
    let model: Model<f64> = init(cnn(), 14);
    let x = random_batch(&[4, 3, 8, 8], 14);
    let labels = random_labels(4, 5, 14);
    // Middle conv+bn unit frozen: its batch norm runs on running statistics.
    let mask = FreezeMask::from_units([0, 2]);
    check(&model, &x, &labels, &mask).assert_ok(200);
    let trace = model.forward_train(&x, &mask).unwrap();
    let g = model.backward(&trace, &labels).unwrap();
    assert!(g.get(0).unwrap()[0].data().iter().any(|v| v.abs() > 1e-8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_stacks_match_finite_differences(
        seed in 0u64..10_000,
        channels in 1usize..4,
        filters in 1usize..4,
        side in 4usize..7,
        hidden in 2usize..8,
        classes in 2usize..5,
        batch in 2usize..5,
        pool_max in any::<bool>(),
        units in proptest::collection::btree_set(0usize..4, 1..4),
    ) {
        use LayerSpec::*;
        let pool = if pool_max { MaxPool { size: 2 } } else { AvgPool { size: 2 } };
        let arch = Architecture::new(
            "random",
            vec![channels, side, side],
            vec![conv(filters, 3), BatchNorm, Relu, pool, Flatten, dense(hidden), Relu, BatchNorm, dense(classes), Softmax],
        );
        let model: Model<f64> = init(arch, seed);
        let x = random_batch(&[batch, channels, side, side], seed);
        let labels = random_labels(batch, classes, seed);
        let mask = FreezeMask::from_units(units.iter().copied());
        let report = check(&model, &x, &labels, &mask);
        prop_assert!(report.worst < TOLERANCE, "max relative error {}", report.worst);
        prop_assert!(report.checked > 0);
    }
}
