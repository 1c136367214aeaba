//! Worst-case propagation and staleness bounds for a balanced aggregation tree.
//!
//! Levels run from 0 (the service level, where Sensors pick up service
//! reports) to `h` (the single distributed-system-level channel). A report
//! reaching level `i` has waited in every lower holding window, crossed every
//! lower Aggregator-to-Forwarder hop, and every Forwarder-to-Aggregator hop up
//! to and including level `i`.
//!
//! All functions are generic over [`TimeScalar`]; use integer microseconds
//! ([`crate::Micros`]) when the recursive and closed forms must agree exactly.

use std::fmt;
use std::ops::Add;

use thiserror::Error;

use crate::num::TimeScalar;

/// Shape and timing parameters of a balanced monitoring hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyConfig<T> {
    /// Number of aggregation levels plus one for the service level.
    pub depth: usize,
    /// `fanout[i]` services of level `i - 1` feed one level-`i` channel;
    /// `fanout[0]` is the number of Application services per Sensor.
    pub fanout: Vec<u64>,
    /// `hold[i]` is the holding time at level `i`; `hold[0]` is the Sensor period.
    pub hold: Vec<T>,
    /// Reporting period of every Application service.
    pub service_period: T,
}

/// One failed check from [`HierarchyConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.message)
    }
}

impl<T: TimeScalar> HierarchyConfig<T> {
    /// Returns every invariant violation, or `Ok(())` when the config describes
    /// a valid balanced tree.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let levels = self.depth + 1;
        if self.depth < 1 {
            violations.push(Violation::new("h", "must be >= 1"));
        }
        if self.fanout.len() != levels {
            violations.push(Violation::new(
                "fanout",
                format!("fanout length must be h+1 = {levels}, got {}", self.fanout.len()),
            ));
        }
        if self.hold.len() != levels {
            violations.push(Violation::new(
                "hold_s",
                format!("hold_s length must be h+1 = {levels}, got {}", self.hold.len()),
            ));
        }
        for (k, n) in self.fanout.iter().enumerate() {
            if *n < 1 {
                violations.push(Violation::new(format!("fanout[{k}]"), "must be >= 1"));
            }
        }
        for (k, hold) in self.hold.iter().enumerate() {
            if !(*hold > T::zero()) {
                violations.push(Violation::new(format!("hold_s[{k}]"), "must be > 0"));
            }
        }
        if !(self.service_period > T::zero()) {
            violations.push(Violation::new("service_period_s", "must be > 0"));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

impl<T> HierarchyConfig<T> {
    /// Number of channels (machines running a Monitoring EventChannel) at
    /// `level`; level 0 counts Sensors, i.e. monitored machines.
    pub fn machines_at_level(&self, level: usize) -> u64 {
        self.fanout
            .iter()
            .skip(level + 1)
            .take(self.depth.saturating_sub(level))
            .product()
    }

    /// Total number of monitored machines (one Sensor each).
    pub fn machines_total(&self) -> u64 {
        self.machines_at_level(0)
    }

    /// Monitored machines beneath a single level-`level` channel.
    pub fn machines_under(&self, level: usize) -> u64 {
        self.fanout.iter().skip(1).take(level).product()
    }
}

/// A latency bound that is either finite or unbounded because some machine
/// on the path is saturated. `Saturated` absorbs addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyBound<T> {
    Finite(T),
    Saturated,
}

impl<T> LatencyBound<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            LatencyBound::Finite(v) => Some(v),
            LatencyBound::Saturated => None,
        }
    }

    pub fn is_saturated(&self) -> bool {
        matches!(self, LatencyBound::Saturated)
    }
}

impl<T: Add<Output = T>> Add for LatencyBound<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        match (self, rhs) {
            (LatencyBound::Finite(a), LatencyBound::Finite(b)) => LatencyBound::Finite(a + b),
            _ => LatencyBound::Saturated,
        }
    }
}

impl<T: Add<Output = T>> Add<T> for LatencyBound<T> {
    type Output = Self;

    fn add(self, rhs: T) -> Self {
        match self {
            LatencyBound::Finite(a) => LatencyBound::Finite(a + rhs),
            LatencyBound::Saturated => LatencyBound::Saturated,
        }
    }
}

impl<T> From<T> for LatencyBound<T> {
    fn from(value: T) -> Self {
        LatencyBound::Finite(value)
    }
}

/// Per-level input and output times. Index `i - 1` of each vector holds the
/// value for level `i`, so both vectors have one entry per aggregation level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTimings<T> {
    /// Forwarder(level i-1) to Aggregator(level i); may be saturated.
    pub t_in: Vec<LatencyBound<T>>,
    /// Aggregator(level i) to Forwarder(level i).
    pub t_out: Vec<T>,
}

impl<T: TimeScalar> ChannelTimings<T> {
    /// All input and output times zero for a depth-`h` hierarchy.
    pub fn zero(depth: usize) -> Self {
        Self {
            t_in: vec![LatencyBound::Finite(T::zero()); depth],
            t_out: vec![T::zero(); depth],
        }
    }

    /// Input time at `level` (1-based).
    pub fn t_in(&self, level: usize) -> LatencyBound<T> {
        self.t_in[level - 1]
    }

    /// Output time at `level` (1-based).
    pub fn t_out(&self, level: usize) -> T {
        self.t_out[level - 1]
    }

    fn covers(&self, level: usize) -> bool {
        self.t_in.len() >= level && self.t_out.len() + 1 >= level
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("level {level} out of range 0..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("timings do not cover levels 1..={0}")]
    TimingsTooShort(usize),
    #[error("invalid hierarchy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<Violation>),
}

fn check_args<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
) -> Result<(), ModelError> {
    config.validate().map_err(ModelError::InvalidConfig)?;
    if level > config.depth {
        return Err(ModelError::LevelOutOfRange {
            level,
            depth: config.depth,
        });
    }
    if !timings.covers(level) {
        return Err(ModelError::TimingsTooShort(level));
    }
    Ok(())
}

/// Propagation time to the level-`level` Aggregator by unrolling the
/// per-level recursion one hop at a time.
pub fn prop_time_recursive<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
) -> Result<LatencyBound<T>, ModelError> {
    check_args(config, timings, level)?;
    Ok(prop_recursion(config, timings, level))
}

fn prop_recursion<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
) -> LatencyBound<T> {
    match level {
        // Worst case the Sensor picks the report up one full period later.
        0 => LatencyBound::Finite(config.hold[0]),
        1 => prop_recursion(config, timings, 0) + timings.t_in(1),
        i => {
            let lower = prop_recursion(config, timings, i - 1);
            lower + config.hold[i - 1] + timings.t_out(i - 1) + timings.t_in(i)
        }
    }
}

/// Propagation time to the level-`level` Aggregator as three independent sums
/// (holds below `level`, outputs below `level`, inputs up to `level`).
pub fn prop_time_closed<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
) -> Result<LatencyBound<T>, ModelError> {
    check_args(config, timings, level)?;
    if level == 0 {
        return Ok(LatencyBound::Finite(config.hold[0]));
    }
    let holds = config.hold[..level].iter().fold(T::zero(), |acc, h| acc + *h);
    let outs = (1..level).fold(T::zero(), |acc, k| acc + timings.t_out(k));
    let ins = (1..=level).fold(LatencyBound::Finite(T::zero()), |acc, k| acc + timings.t_in(k));
    Ok(ins + holds + outs)
}

/// Worst-case age of a service report once it reaches `level`: propagation
/// plus one service reporting period.
pub fn staleness<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
) -> Result<LatencyBound<T>, ModelError> {
    staleness_for_period(config, timings, level, config.service_period)
}

/// [`staleness`] for a service whose reporting period differs from the
/// config-wide one.
pub fn staleness_for_period<T: TimeScalar>(
    config: &HierarchyConfig<T>,
    timings: &ChannelTimings<T>,
    level: usize,
    service_period: T,
) -> Result<LatencyBound<T>, ModelError> {
    Ok(prop_time_closed(config, timings, level)? + service_period)
}

pub fn machines_total<T>(config: &HierarchyConfig<T>) -> u64 {
    config.machines_total()
}
