//! Counterfactual debiasing of scene-graph predicate classifiers on a
//! synthetic long-tailed world, with graph-embedding retrieval on top.

pub mod effects;
pub mod error;
pub mod experiment;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
