//! Attentive neural controlled differential equations.
//!
//! A bottom neural CDE reads the spline path `X(t)` of an irregular series and
//! produces attention; the attended path `Y(t)` drives a top neural CDE whose
//! final state feeds a classification or regression head.

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod path;
pub mod scalar;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations.
pub type TimeSeries64 = path::TimeSeries<f64>;
pub type SplinePath64 = path::SplinePath<f64>;
pub type Mlp64 = nn::Mlp<f64>;
pub type CdeFunc64 = nn::CdeFunc<f64>;
pub type SolverConfig64 = solver::SolverConfig<f64>;
pub type AncdeModel64 = model::AncdeModel<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Example64 = data::Example<f64>;
pub type TrainConfig64 = train::TrainConfig<f64>;
