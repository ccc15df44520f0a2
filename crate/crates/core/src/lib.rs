pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod numcore;
pub mod scalar;
pub mod synth;
pub mod topics;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used by the CLI and the training loop.
pub type Array = numcore::Array<f64>;
pub type ParameterSet = numcore::ParameterSet<f64>;
pub type SessionGraph = graph::SessionGraph<f64>;
pub type RiGnn = model::RiGnn<f64>;
