//! Pseudolikelihood inference of intensity transmission matrices.
//!
//! The numerical core is generic over the scalar type; the aliases below fix it to
//! `f64` (default) or `f32`.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod extraction;
pub mod factor;
pub mod io;
pub mod lbfgs;
pub mod model;
pub mod optimizer;
pub mod pseudolikelihood;
pub mod rng;
pub mod scalar;
pub mod selection;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Dataset = model::Dataset<f64>;
pub type Dataset32 = model::Dataset<f32>;
pub type TransmissionMatrix = model::TransmissionMatrix<f64>;
pub type TransmissionMatrix32 = model::TransmissionMatrix<f32>;
pub type CouplingEstimate = optimizer::CouplingEstimate<f64>;
pub type CouplingEstimate32 = optimizer::CouplingEstimate<f32>;
pub type RowParams = pseudolikelihood::RowParams<f64>;
pub type RowParams32 = pseudolikelihood::RowParams<f32>;
