//! Improved consistency training at desk scale.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`, see
//! [`Scalar`]); the aliases at the bottom of this file fix a precision. The
//! config, checkpoint and command-line layers work in `f64`.

// `!(a > b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod net;
pub mod prop1;
pub mod random;
pub mod scalar;
pub mod schedules;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type NoiseGridF64 = schedules::NoiseGrid<f64>;
pub type NoiseGridF32 = schedules::NoiseGrid<f32>;
pub type MetricF64 = metrics::Metric<f64>;
pub type MetricF32 = metrics::Metric<f32>;
pub type DistributionF64 = synthetic::SyntheticDistribution<f64>;
pub type DistributionF32 = synthetic::SyntheticDistribution<f32>;
pub type NetworkF64 = net::Network<f64>;
pub type NetworkF32 = net::Network<f32>;
pub type ConsistencyModelF64 = consistency::ConsistencyModel<f64>;
pub type ConsistencyModelF32 = consistency::ConsistencyModel<f32>;
pub type TrainConfigF64 = train::TrainConfig<f64>;
pub type TrainConfigF32 = train::TrainConfig<f32>;
pub type TrainStateF64 = train::TrainState<f64>;
pub type TrainStateF32 = train::TrainState<f32>;
