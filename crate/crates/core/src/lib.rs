//! Hierarchical publish-subscribe monitoring.
//!
//! Sensors collect service reports on every monitored machine and publish a
//! node report to the first aggregation level. Each Monitoring EventChannel
//! buffers reports for its holding time, its Aggregator merges them into one
//! XML document and its Forwarder publishes the result one level up, until a
//! single distributed-system report exists at the root.
//!
//! - [`model`]: worst-case propagation and staleness bounds.
//! - [`report`]: the XML report document and lossless aggregation.
//! - [`channel`]: Sensor and EventChannel state machines.
//! - [`loadmodel`]: CPU utilization and input/output delay model, plus an
//!   on-host calibration microbenchmark.
//! - [`sim`]: deterministic discrete-event simulation of a whole hierarchy.
//! - [`cli`]: the `hiermon` command-line front end.

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod loadmodel;
pub mod model;
pub mod num;
pub mod report;
pub mod sim;

/// Durations and timestamps in whole microseconds.
pub type Micros = i64;

/// Hierarchy with exact microsecond timings.
pub type Hierarchy = model::HierarchyConfig<Micros>;
/// Per-level input/output times in microseconds.
pub type Timings = model::ChannelTimings<Micros>;
/// Latency bound in microseconds.
pub type Bound = model::LatencyBound<Micros>;

/// Load-model coefficients in seconds.
pub type Coefficients = loadmodel::LoadCoefficients<f64>;
