//! Query performance prediction for parallel DAG pipeline executors.
//!
//! The crate combines a trace-generating pipeline simulator with a staged
//! learned predictor:
//!
//! 1. per-operator-type cost predictors estimate a 10-component resource
//!    cost vector from runtime features ([`models`]),
//! 2. a graph attention stage calibrates those costs for resource
//!    contention between concurrently running operators ([`contention`],
//!    [`models`]),
//! 3. a tree convolution stage aggregates the calibrated costs over the
//!    data-flow tree and predicts whole-query latency.
//!
//! The simulator ([`tracesim`]) plays the role of the instrumented
//! database: it executes synthetic pipelines in serial, parallel, and
//! probe modes and emits chunk-level execution traces ([`domain`]) that a
//! real tracker could produce instead.

pub mod contention;
pub mod dataflow;
pub mod domain;
pub mod harness;
pub mod models;
pub mod runner;
pub mod tensor;
pub mod tracesim;

mod error;

pub use error::{Error, Result};
