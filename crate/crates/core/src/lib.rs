//! Heuristic domain adaptation on synthetic domain-shift tasks.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the runner uses.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hdan;
pub mod nn;
pub mod runner;
pub mod scalar;

pub use error::{Error, Result};

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type SgdState = nn::SgdState<f64>;
pub type DomainDataset = data::DomainDataset<f64>;
pub type Task = data::Task<f64>;
pub type HdanModel = hdan::HdanModel<f64>;
pub type DomainBatch = hdan::DomainBatch<f64>;
pub type ObjectiveSettings = hdan::ObjectiveSettings<f64>;
