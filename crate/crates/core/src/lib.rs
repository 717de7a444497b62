//! Memory-and-anticipation transformer for unified online action detection
//! and anticipation.
//!
//! The numeric core is generic over [`Scalar`]; models train in `f32` and the
//! gradient checker re-runs the identical code in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod circular_decoder;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod memory_encoder;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod streaming;
pub mod training;

pub use config::{GrammarConfig, ModelConfig, RunConfig};
pub use error::{MatError, Result};
pub use model::MatModel;
pub use numerics::{Graph, Tensor, Var};
pub use params::ParamStore;
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
