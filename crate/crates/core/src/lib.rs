//! Task- and instance-conditioned parameter sharing for multi-task learning.
//!
//! A residual backbone whose blocks are selected per task by a learned
//! discrete policy and skipped per instance by learned gating units, trained
//! through Gumbel-Softmax relaxations on a small reverse-mode autodiff engine.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Var<'g> = autodiff::Var<'g, f64>;
pub type GatedBackbone = backbone::GatedBackbone<f64>;
pub type PolicyDistribution = policy::PolicyDistribution<f64>;
pub type TrainState = trainer::TrainState<f64>;
pub type Optimizer = optim::Optimizer<f64>;
