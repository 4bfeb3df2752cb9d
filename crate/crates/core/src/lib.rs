//! Federated averaging where every client trains a random subset of the
//! model's layers each round and uploads only those layers.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is
//! pure computation: the sequential network engine with freeze masks,
//! architecture descriptors and parameter counting, the model wire format,
//! layer selection, the client update, layer-wise aggregation, metrics,
//! synthetic datasets and partitioners, and uplink traffic estimation.
//! Sockets, files and the command line live in the `fedfreeze` crate.

#![no_std]

extern crate alloc;

pub mod aggregate;
pub mod arch;
pub mod client;
pub mod codec;
pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod selection;
pub mod tensor;
pub mod traffic;

pub use aggregate::{aggregate, apply_round_smoothing, GlobalState, RoundPlan};
pub use arch::{count_parameters, Architecture, LayerSpec, ParameterCount, Unit};
pub use client::{client_update, ClientConfig, PartialUpdate};
pub use data::{Dataset, Partition};
pub use error::{Error, Result};
pub use nn::{FreezeMask, GradientSet, Model, OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use selection::select_layers;
pub use tensor::Tensor;
