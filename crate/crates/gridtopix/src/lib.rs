//! Grid-to-pixel policy transfer lab.
//!
//! Trains expert policies in perfect-perception grid mirrors of small
//! embodied tasks using terminal rewards, distills them into agents that
//! act on rendered pixel observations, and compares against direct
//! pixel-based RL under terminal and shaped reward structures.
//!
//! The numerical core (tensors, autodiff, optimizer, networks) is generic
//! over the scalar type: training runs at `f32`, while the
//! finite-difference verification harness instantiates the same code at
//! `f64`. Concrete `f32` aliases are exported below.

pub mod config;
pub mod distill;
pub mod harness;
pub mod env;
pub mod error;
pub mod gae;
pub mod rewards;
pub mod rollout;
pub mod routine;
pub mod update;
pub mod metrics;
pub mod net;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Training-precision autodiff graph.
pub type Graph32 = graph::Graph<f32>;
/// Training-precision parameter set.
pub type ParamSet32 = params::ParamSet<f32>;
/// Training-precision Adam.
pub type Adam32 = optim::Adam<f32>;
