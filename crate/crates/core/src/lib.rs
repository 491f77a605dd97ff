//! Early-exit co-inference simulator core.
//!
//! Everything here is pure computation over in-memory data: the trace data
//! model, a small dense network library, the synthetic multi-exit toy
//! backbone, the policy engine with its FLOP/latency accounting, the exit
//! predictor, and the latency-constrained threshold optimizer. File formats
//! and the command line live in the `exitsim` crate.
//!
//! The crate builds without `std` (it needs `alloc`). All floating point
//! transcendental functions go through `libm`, so results do not depend on
//! the platform's math library.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod math;
pub mod nn;
pub mod optimizer;
pub mod predictor;
pub mod trace;
pub mod zoo;

pub use crate::engine::{AggregateReport, DecisionRecord, Environment, Evaluation};
pub use crate::error::{Error, Result};
pub use crate::nn::{Activation, Layer, LossKind, Mlp, TrainConfig};
pub use crate::optimizer::{PolicyPoint, ThresholdRegressor};
pub use crate::predictor::ExitPredictor;
pub use crate::trace::{ExitTopology, SampleTrace, Thresholds, TraceSet};
