//! Architecture descriptors, shape inference and exact parameter counting.
//!
//! Per-sample shapes carry no batch dimension. Spatial tensors are
//! channels-first: `[channels, height, width]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad by `(kernel - 1) / 2` on each side; requires an odd kernel.
    #[default]
    Same,
    Valid,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    BatchNorm,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Flatten,
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm)
    }

    /// Output shape for one sample with the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Architecture(msg));
        match *self {
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return bad(format!("dense expects a flat input, got {:?}", input));
                }
                if units == 0 {
                    return bad("dense layer with zero units".into());
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let [_, h, w] = spatial(input, "conv2d")?;
                if filters == 0 || kernel == 0 || stride == 0 {
                    return bad("conv2d filters, kernel and stride must be positive".into());
                }
                let pad = match padding {
                    Padding::Same if kernel % 2 == 0 => {
                        return bad(format!("same padding needs an odd kernel, got {}", kernel))
                    }
                    Padding::Same => (kernel - 1) / 2,
                    Padding::Valid => 0,
                };
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return bad(format!("conv2d kernel {} larger than input {:?}", kernel, input));
                }
                Ok(vec![filters, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            LayerSpec::BatchNorm => {
                if input.len() != 1 && input.len() != 3 {
                    return bad(format!("batch_norm expects a flat or spatial input, got {:?}", input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size } => {
                let [c, h, w] = spatial(input, self.name())?;
                if size == 0 || size > h || size > w {
                    return bad(format!("pool size {} does not fit input {:?}", size, input));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return bad(format!("softmax expects a flat input, got {:?}", input));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Parameter shapes in storage order. For batch norm: gamma, beta,
    /// running mean, running variance.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units } => vec![vec![units, input[0]], vec![units]],
            LayerSpec::Conv2d { filters, kernel, .. } => {
                vec![vec![filters, input[0], kernel, kernel], vec![filters]]
            }
            LayerSpec::BatchNorm => vec![vec![input[0]]; 4],
            _ => Vec::new(),
        }
    }

    /// Number of leading entries of `param_shapes` that receive gradients.
    pub fn trainable_param_tensors(&self) -> usize {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm => 2,
            _ => 0,
        }
    }

    /// `(trainable, non_trainable)` parameter counts.
    pub fn param_counts(&self, input: &[usize]) -> (u64, u64) {
        match *self {
            LayerSpec::Dense { units } => (((input[0] + 1) * units) as u64, 0),
            LayerSpec::Conv2d { filters, kernel, .. } => {
                (((kernel * kernel * input[0] + 1) * filters) as u64, 0)
            }
            LayerSpec::BatchNorm => ((2 * input[0]) as u64, (2 * input[0]) as u64),
            _ => (0, 0),
        }
    }
}

fn spatial(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Architecture(format!(
            "{} expects a [channels, height, width] input, got {:?}",
            what, input
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// A group of layers that is selected, trained and transferred as one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub layers: Vec<usize>,
    pub param_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub index: usize,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub trainable: u64,
    pub non_trainable: u64,
}

impl LayerCount {
    pub fn total(&self) -> u64 {
        self.trainable + self.non_trainable
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: u64,
    pub trainable: u64,
    pub non_trainable: u64,
    pub per_layer: Vec<LayerCount>,
    pub trainable_units: usize,
}

impl Architecture {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { name: name.into(), input_shape, layers }
    }

    /// Input shape of every layer followed by the final output shape
    /// (`layers.len() + 1` entries).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Architecture(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer
                .output_shape(&shapes[i])
                .map_err(|e| Error::Architecture(format!("layer {} ({}): {}", i, layer.name(), e)))?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_default())
    }

    /// Trainable units: a conv2d together with a directly following
    /// batch_norm, or any other parameterized layer on its own.
    pub fn units(&self) -> Result<Vec<Unit>> {
        let shapes = self.shapes()?;
        let count = |i: usize| {
            let (t, n) = self.layers[i].param_counts(&shapes[i]);
            t + n
        };
        let mut units = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let layer = &self.layers[i];
            if !layer.has_params() {
                i += 1;
                continue;
            }
            let mut members = vec![i];
            if matches!(layer, LayerSpec::Conv2d { .. })
                && matches!(self.layers.get(i + 1), Some(LayerSpec::BatchNorm))
            {
                members.push(i + 1);
            }
            i += members.len();
            let param_count = members.iter().map(|&m| count(m)).sum();
            units.push(Unit { layers: members, param_count });
        }
        Ok(units)
    }

    pub fn num_units(&self) -> Result<usize> {
        Ok(self.units()?.len())
    }

    pub fn total_params(&self) -> Result<u64> {
        Ok(count_parameters(self)?.total)
    }
}

pub fn count_parameters(arch: &Architecture) -> Result<ParameterCount> {
    if arch.layers.is_empty() {
        return Ok(ParameterCount {
            total: 0,
            trainable: 0,
            non_trainable: 0,
            per_layer: Vec::new(),
            trainable_units: 0,
        });
    }
    let shapes = arch.shapes()?;
    let per_layer: Vec<LayerCount> = arch
        .layers
        .iter()
        .enumerate()
        .map(|(index, layer)| {
            let (trainable, non_trainable) = layer.param_counts(&shapes[index]);
            LayerCount {
                index,
                kind: layer.name(),
                output_shape: shapes[index + 1].clone(),
                trainable,
                non_trainable,
            }
        })
        .collect();
    let trainable = per_layer.iter().map(|l| l.trainable).sum();
    let non_trainable = per_layer.iter().map(|l| l.non_trainable).sum();
    Ok(ParameterCount {
        total: trainable + non_trainable,
        trainable,
        non_trainable,
        per_layer,
        trainable_units: arch.num_units()?,
    })
}
