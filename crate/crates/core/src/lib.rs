//! ROI-aware graph isomorphism networks (BrainRGIN) for graph-level regression
//! on functional-connectivity graphs.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used for verification.

pub mod checks;
pub mod cli;
pub mod config;
pub mod covariates;
pub mod data;
pub mod experiment;
pub mod fnc_graph;
pub mod interpret;
pub mod losses;
pub mod model;
pub mod pool;
pub mod readout;
pub mod rgin;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Graph = fnc_graph::FncGraph<f64>;
pub type Model = model::Model<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Tape<'p> = tensor::Tape<'p, f64>;
