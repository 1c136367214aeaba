//! Deterministic discrete-event simulation of a balanced monitoring hierarchy.
//!
//! The clock is integer microseconds. Application services tick with a
//! seeded phase, Sensors and channels flush on fixed timers, and every hop
//! takes the input/output time the load model assigns to its level in steady
//! state. Delays are deterministic, so the analytic bound computed from the
//! same timings must dominate every observed propagation time.
//!
//! Ties at one instant run flushes first, then forwarder departures, then
//! arrivals, then service ticks; a service report emitted exactly at a Sensor
//! flush therefore waits a full Sensor period.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{ChannelState, RoleEvent, RoleEventKind, SensorState};
use crate::loadmodel::{hierarchy_loads, sensor_utilization, timings_from_loads, CoefficientsError};
use crate::model::{prop_time_closed, staleness, LatencyBound, Violation};
use crate::num::format_micros_as_secs;
use crate::report::{machine_id, measure, service_id, Report, ReportGenerator, ReportKind};
use crate::{Bound, Coefficients, Hierarchy, Micros, Timings};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid hierarchy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidHierarchy(Vec<Violation>),
    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(#[from] CoefficientsError),
    #[error("{0} must be a whole number of milliseconds")]
    NotMillisecondAligned(String),
    #[error("duration {duration}us shorter than three times the sum of holds ({minimum}us)")]
    DurationTooShort { duration: Micros, minimum: Micros },
    #[error("jitter fraction {0} outside [0, 1)")]
    InvalidJitter(f64),
    #[error("saturated channels on levels {0:?}")]
    SaturatedTopology(Vec<usize>),
    #[error("trace not comparable with the model: {0}")]
    NotComparable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub hierarchy: Hierarchy,
    pub coeffs: Coefficients,
    pub duration: Micros,
    pub seed: u64,
    /// Service tick phases are drawn from `[0, jitter_fraction * period)`.
    pub jitter_fraction: f64,
}

impl SimConfig {
    /// Zero jitter, seed 0 and a run of four times the sum of all holds.
    pub fn new(hierarchy: Hierarchy, coeffs: Coefficients) -> Self {
        let duration = 4 * hierarchy.hold.iter().sum::<Micros>();
        Self {
            hierarchy,
            coeffs,
            duration,
            seed: 0,
            jitter_fraction: 0.0,
        }
    }

    pub fn min_duration(&self) -> Micros {
        3 * self.hierarchy.hold.iter().sum::<Micros>()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.hierarchy.validate().map_err(SimError::InvalidHierarchy)?;
        self.coeffs.validate()?;
        for (k, h) in self.hierarchy.hold.iter().enumerate() {
            if h % 1000 != 0 {
                return Err(SimError::NotMillisecondAligned(format!("hold_s[{k}]")));
            }
        }
        if self.hierarchy.service_period % 1000 != 0 {
            return Err(SimError::NotMillisecondAligned("service_period_s".into()));
        }
        if self.duration < self.min_duration() {
            return Err(SimError::DurationTooShort {
                duration: self.duration,
                minimum: self.min_duration(),
            });
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(SimError::InvalidJitter(self.jitter_fraction));
        }
        Ok(())
    }
}

/// Arrival of one service report at the distributed-system-level Aggregator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub service_id: String,
    pub emitted_at: Micros,
    pub arrived_root_at: Micros,
    pub propagation: Micros,
    /// Channels traversed, first level upward.
    pub level_path: Vec<String>,
}

/// One service report produced by an Application service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub service_id: String,
    pub emitted_at: Micros,
    /// Replaced by a newer report from the same source before moving on.
    pub superseded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineRecord {
    pub id: String,
    /// 0 for Sensor machines, otherwise the channel's aggregation level.
    pub level: usize,
    pub utilization: f64,
}

/// Result of comparing what reached the root with what was published.
///
/// A report counts as published unless latest-wins deduplication replaced it
/// (at the Sensor or in some channel window). Only reports emitted early
/// enough to have reached the root before the end of the run are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LosslessCheck {
    /// Published reports old enough to be checked.
    pub checked: usize,
    /// Checked reports absent from every root system report.
    pub missing: usize,
    /// Root leaves seen more than once.
    pub duplicated: usize,
    /// Root leaves that were never published.
    pub unexpected: usize,
    /// Checked reports without exactly one delivery record.
    pub delivery_mismatches: usize,
}

impl LosslessCheck {
    pub fn is_lossless(&self) -> bool {
        self.missing == 0 && self.duplicated == 0 && self.unexpected == 0 && self.delivery_mismatches == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub deliveries: Vec<DeliveryRecord>,
    pub machines: Vec<MachineRecord>,
    pub max_observed_prop: Option<Micros>,
    /// Propagation bound to the root from the timings used in the run.
    pub analytic_bound: Bound,
    pub staleness_bound: Bound,
    pub timings: Timings,
    /// Levels whose channels are saturated.
    pub saturated_levels: Vec<usize>,
    /// Messages that crossed a saturated hop with the substitute delay.
    pub saturated_messages: u64,
    pub root_flushes: u64,
    pub emitted: usize,
    pub superseded: usize,
    pub lossless: LosslessCheck,
    /// Every service report emitted during the run, in emission order.
    pub emissions: Vec<Emitted>,
    /// `(service_id, emitted_at)` of every leaf in every root output.
    pub root_leaves: Vec<(String, Micros)>,
    /// Reports emitted at or before this instant had time to reach a root
    /// output before the run ended.
    pub root_cutoff: Micros,
}

pub const DELIVERIES_CSV_HEADER: &str = "service_id,emitted_at_us,arrived_root_at_us,propagation_us";
pub const MACHINES_CSV_HEADER: &str = "channel_id,level,utilization";

impl SimTrace {
    pub fn saturation(&self) -> Result<(), SimError> {
        if self.saturated_levels.is_empty() {
            Ok(())
        } else {
            Err(SimError::SaturatedTopology(self.saturated_levels.clone()))
        }
    }

    pub fn per_machine_utilization(&self) -> HashMap<&str, f64> {
        self.machines.iter().map(|m| (m.id.as_str(), m.utilization)).collect()
    }

    pub fn deliveries_csv(&self) -> String {
        let mut out = format!("{DELIVERIES_CSV_HEADER}\n");
        for d in &self.deliveries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d.service_id, d.emitted_at, d.arrived_root_at, d.propagation
            ));
        }
        out
    }

    pub fn machines_csv(&self) -> String {
        let mut out = format!("{MACHINES_CSV_HEADER}\n");
        for m in &self.machines {
            out.push_str(&format!("{},{},{}\n", m.id, m.level, m.utilization));
        }
        out
    }
}

/// Outcome of [`verify_against_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub bound_respected: bool,
    /// Largest observed propagation over the analytic bound.
    pub tightness: f64,
}

pub fn verify_against_model(trace: &SimTrace) -> Result<Verification, SimError> {
    let bound = match trace.analytic_bound {
        LatencyBound::Finite(b) if b > 0 => b,
        LatencyBound::Finite(_) => return Err(SimError::NotComparable("zero bound".into())),
        LatencyBound::Saturated => return Err(SimError::NotComparable("analytic bound is saturated".into())),
    };
    let observed = trace
        .max_observed_prop
        .ok_or_else(|| SimError::NotComparable("no report reached the root".into()))?;
    Ok(Verification {
        bound_respected: observed <= bound,
        tightness: observed as f64 / bound as f64,
    })
}

pub fn channel_id(level: usize, index: u64) -> String {
    format!("channel-L{level}-{index:06}")
}

/// Serialized size in kB of one report per level, from generated prototypes.
/// Level `i` is one envelope plus `fanout[i]` level-`i - 1` reports.
pub fn generated_report_sizes(hierarchy: &Hierarchy, at_ms: u64) -> Vec<f64> {
    let generator = ReportGenerator::default();
    let mut proto = generator.node_report_with(0, hierarchy.fanout[0], at_ms);
    let mut bytes = vec![measure(&proto).bytes as f64];
    for level in 1..=hierarchy.depth {
        let kind = if level == hierarchy.depth {
            ReportKind::System
        } else {
            ReportKind::Intermediate
        };
        let child_bytes = measure(&proto).bytes as f64;
        proto = crate::report::aggregate(vec![proto], kind, &channel_id(level, 0), at_ms)
            .expect("prototype nesting is valid");
        let envelope = measure(&proto).bytes as f64 - child_bytes;
        bytes.push(envelope + hierarchy.fanout[level] as f64 * bytes[level - 1]);
    }
    bytes.into_iter().map(|b| b / 1024.0).collect()
}

#[derive(Debug)]
struct Scheduled {
    at: Micros,
    order: u8,
    seq: u64,
    target: usize,
    service: usize,
    event: RoleEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl Scheduled {
    fn key(&self) -> (Micros, u8, u64) {
        (self.at, self.order, self.seq)
    }
}

fn tie_order(kind: RoleEventKind) -> u8 {
    match kind {
        RoleEventKind::SensorFlush | RoleEventKind::ChannelFlush => 0,
        RoleEventKind::ForwardDeparture => 1,
        RoleEventKind::ChannelArrival => 2,
        RoleEventKind::AppServiceTick => 3,
    }
}

struct Topology {
    channel_level: Vec<usize>,
    channel_parent: Vec<Option<usize>>,
    sensor_parent: Vec<usize>,
    root: usize,
}

impl Topology {
    fn new(h: &Hierarchy) -> Self {
        let mut level_offset = vec![0; h.depth + 1];
        let mut channel_level = Vec::new();
        let mut channel_parent = Vec::new();
        for level in 1..=h.depth {
            level_offset[level] = channel_level.len();
            for idx in 0..h.machines_at_level(level) {
                channel_level.push(level);
                channel_parent.push(None);
                if level > 1 {
                    let first_child = level_offset[level - 1] + (idx * h.fanout[level]) as usize;
                    for c in 0..h.fanout[level] as usize {
                        channel_parent[first_child + c] = Some(channel_level.len() - 1);
                    }
                }
            }
        }
        let sensor_parent = (0..h.machines_total())
            .map(|m| level_offset[1] + (m / h.fanout[1]) as usize)
            .collect();
        Self {
            root: level_offset[h.depth],
            channel_level,
            channel_parent,
            sensor_parent,
        }
    }

    fn path_from_sensor(&self, machine: usize, ids: &[String]) -> Vec<String> {
        let mut path = vec![ids[self.sensor_parent[machine]].clone()];
        let mut c = self.sensor_parent[machine];
        while let Some(p) = self.channel_parent[c] {
            path.push(ids[p].clone());
            c = p;
        }
        path
    }
}

#[derive(Debug, Default)]
struct Emission {
    superseded: bool,
    root_count: usize,
    deliveries: usize,
}

struct Run<'a> {
    config: &'a SimConfig,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    sensors: Vec<SensorState>,
    channels: Vec<ChannelState>,
    channel_ids: Vec<String>,
    topo: Topology,
    machine_index: HashMap<String, usize>,
    paths: HashMap<usize, Vec<String>>,
    t_in: Vec<Micros>,
    t_out: Vec<Micros>,
    saturated_in: Vec<bool>,
    saturated_messages: u64,
    emissions: HashMap<(String, u64), Emission>,
    emission_order: Vec<(String, u64)>,
    unexpected_root_leaves: usize,
    root_leaves: Vec<(String, Micros)>,
    deliveries: Vec<DeliveryRecord>,
    root_flushes: u64,
}

impl Run<'_> {
    fn schedule(&mut self, at: Micros, kind: RoleEventKind, target: usize, service: usize, payload: Option<Report>) {
        if at > self.config.duration {
            return;
        }
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            order: tie_order(kind),
            seq: self.seq,
            target,
            service,
            event: RoleEvent { kind, at, payload },
        }));
    }

    /// Delay into a level-`level` channel.
    fn input_delay(&mut self, level: usize) -> Micros {
        if self.saturated_in[level - 1] {
            self.saturated_messages += 1;
        }
        self.t_in[level - 1]
    }

    fn mark_superseded(&mut self, report: &Report) {
        report.for_each_leaf(&mut |leaf| {
            if let Some(e) = self
                .emissions
                .get_mut(&(leaf.service_id().to_owned(), leaf.generated_at_ms()))
            {
                e.superseded = true;
            }
        });
    }

    fn record_deliveries(&mut self, report: &Report, now: Micros) {
        let mut leaves = Vec::new();
        report.for_each_leaf(&mut |leaf| {
            leaves.push((
                leaf.service_id().to_owned(),
                leaf.source_machine().to_owned(),
                leaf.generated_at_ms(),
            ))
        });
        for (service, machine, ms) in leaves {
            let emitted_at = ms as Micros * 1000;
            let m = self.machine_index[&machine];
            let level_path = match self.paths.get(&m) {
                Some(p) => p.clone(),
                None => {
                    let p = self.topo.path_from_sensor(m, &self.channel_ids);
                    self.paths.insert(m, p.clone());
                    p
                }
            };
            if let Some(e) = self.emissions.get_mut(&(service.clone(), ms)) {
                e.deliveries += 1;
            }
            self.deliveries.push(DeliveryRecord {
                service_id: service,
                emitted_at,
                arrived_root_at: now,
                propagation: now - emitted_at,
                level_path,
            });
        }
    }

    fn record_root_output(&mut self, report: &Report) {
        let mut unexpected = 0;
        report.for_each_leaf(&mut |leaf| {
            self.root_leaves
                .push((leaf.service_id().to_owned(), leaf.generated_at_ms() as Micros * 1000));
            match self
                .emissions
                .get_mut(&(leaf.service_id().to_owned(), leaf.generated_at_ms()))
            {
                Some(e) => e.root_count += 1,
                None => unexpected += 1,
            }
        });
        self.unexpected_root_leaves += unexpected;
    }

    fn step(&mut self, s: Scheduled) {
        let now = s.at;
        let h = self.config.hierarchy.depth;
        match s.event.kind {
            RoleEventKind::AppServiceTick => {
                let sensor = &mut self.sensors[s.target];
                let (service, period) = sensor.app_services()[s.service].clone();
                let replaced = sensor
                    .on_app_tick(&service, now)
                    .expect("tick for a registered service");
                if let Some(old) = replaced {
                    if let Some(e) = self
                        .emissions
                        .get_mut(&(old.service_id().to_owned(), old.generated_at_ms()))
                    {
                        e.superseded = true;
                    }
                }
                let key = (service, (now / 1000) as u64);
                self.emission_order.push(key.clone());
                self.emissions.insert(key, Emission::default());
                self.schedule(now + period, RoleEventKind::AppServiceTick, s.target, s.service, None);
            }
            RoleEventKind::SensorFlush => {
                let sensor = &mut self.sensors[s.target];
                let report = sensor.flush(now);
                let next = sensor.next_flush_at();
                if let Some(report) = report {
                    let delay = self.input_delay(1);
                    let parent = self.topo.sensor_parent[s.target];
                    self.schedule(now + delay, RoleEventKind::ChannelArrival, parent, 0, Some(report));
                }
                self.schedule(next, RoleEventKind::SensorFlush, s.target, 0, None);
            }
            RoleEventKind::ChannelArrival => {
                let report = s.event.payload.expect("arrival carries a report");
                if s.target == self.topo.root {
                    self.record_deliveries(&report, now);
                }
                self.channels[s.target]
                    .on_publish(report, now)
                    .expect("topology only routes reports upward");
            }
            RoleEventKind::ChannelFlush => {
                let level = self.topo.channel_level[s.target];
                let out = self.channels[s.target].flush_detailed(now);
                for dropped in &out.superseded {
                    self.mark_superseded(dropped);
                }
                if s.target == self.topo.root {
                    self.root_flushes += 1;
                    if let Some(r) = &out.report {
                        self.record_root_output(r);
                    }
                }
                if let Some(report) = out.report {
                    let at = now + self.t_out[level - 1];
                    self.schedule(at, RoleEventKind::ForwardDeparture, s.target, 0, Some(report));
                }
                let next = self.channels[s.target].next_flush_at();
                self.schedule(next, RoleEventKind::ChannelFlush, s.target, 0, None);
            }
            RoleEventKind::ForwardDeparture => {
                if let Some(parent) = self.topo.channel_parent[s.target] {
                    let level = self.topo.channel_level[s.target] + 1;
                    debug_assert!(level <= h);
                    let delay = self.input_delay(level);
                    self.schedule(now + delay, RoleEventKind::ChannelArrival, parent, 0, s.event.payload);
                }
            }
        }
    }
}

/// Runs one simulation. A saturated topology still yields a trace; its
/// analytic bound is `Saturated` and [`SimTrace::saturation`] reports it.
pub fn run(config: &SimConfig) -> Result<SimTrace, SimError> {
    config.validate()?;
    let h = &config.hierarchy;
    let depth = h.depth;
    let top_hold = h.hold[depth];

    let sizes = generated_report_sizes(h, (config.duration / 2000) as u64);
    let loads = hierarchy_loads(h, &config.coeffs, &sizes);
    let timings = timings_from_loads(&loads);
    let saturated_in: Vec<bool> = timings.t_in.iter().map(LatencyBound::is_saturated).collect();
    let t_in: Vec<Micros> = timings
        .t_in
        .iter()
        .map(|t| t.finite().unwrap_or(10 * top_hold))
        .collect();
    let effective = Timings {
        t_in: t_in.iter().copied().map(LatencyBound::Finite).collect(),
        t_out: timings.t_out.clone(),
    };
    let analytic_bound = prop_time_closed(h, &timings, depth).expect("validated config");
    let staleness_bound = staleness(h, &timings, depth).expect("validated config");
    let effective_bound = prop_time_closed(h, &effective, depth)
        .expect("validated config")
        .finite()
        .expect("substituted delays are finite");

    let topo = Topology::new(h);
    let mut channel_ids = Vec::with_capacity(topo.channel_level.len());
    let mut machines = Vec::new();
    for level in 1..=depth {
        for idx in 0..h.machines_at_level(level) {
            channel_ids.push(channel_id(level, idx));
        }
    }
    let channels: Vec<ChannelState> = (0..channel_ids.len())
        .map(|c| {
            let level = topo.channel_level[c];
            ChannelState::new(
                channel_ids[c].clone(),
                level,
                h.hold[level],
                c == topo.root,
                topo.channel_parent[c].map(|p| channel_ids[p].clone()),
            )
        })
        .collect();

    let sensor_u = sensor_utilization(h, &config.coeffs, sizes[0]);
    let mut sensors = Vec::new();
    let mut machine_index = HashMap::new();
    for m in 0..h.machines_total() {
        let id = machine_id(m);
        let services = (0..h.fanout[0])
            .map(|j| (service_id(&id, j), h.service_period))
            .collect();
        machine_index.insert(id.clone(), m as usize);
        machines.push(MachineRecord {
            id: id.clone(),
            level: 0,
            utilization: sensor_u,
        });
        sensors.push(SensorState::new(id, services, h.hold[0]));
    }
    for (c, id) in channel_ids.iter().enumerate() {
        let level = topo.channel_level[c];
        machines.push(MachineRecord {
            id: id.clone(),
            level,
            utilization: loads[level - 1].utilization,
        });
    }
    let saturated_levels: Vec<usize> = loads
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_saturated())
        .map(|(i, _)| i + 1)
        .collect();

    let mut run = Run {
        config,
        queue: BinaryHeap::new(),
        seq: 0,
        sensors,
        channels,
        channel_ids,
        topo,
        machine_index,
        paths: HashMap::new(),
        t_in,
        t_out: timings.t_out.clone(),
        saturated_in,
        saturated_messages: 0,
        emissions: HashMap::new(),
        emission_order: Vec::new(),
        unexpected_root_leaves: 0,
        root_leaves: Vec::new(),
        deliveries: Vec::new(),
        root_flushes: 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let period_ms = h.service_period / 1000;
    let max_phase_ms = (config.jitter_fraction * period_ms as f64).floor() as i64;
    for m in 0..run.sensors.len() {
        for j in 0..h.fanout[0] as usize {
            let phase_ms = if max_phase_ms > 0 {
                rng.gen_range(0..max_phase_ms)
            } else {
                0
            };
            run.schedule(phase_ms * 1000, RoleEventKind::AppServiceTick, m, j, None);
        }
        run.schedule(h.hold[0], RoleEventKind::SensorFlush, m, 0, None);
    }
    for c in 0..run.channels.len() {
        let hold = run.channels[c].hold();
        run.schedule(hold, RoleEventKind::ChannelFlush, c, 0, None);
    }

    while let Some(Reverse(next)) = run.queue.pop() {
        run.step(next);
    }

    let delivery_cutoff = config.duration - effective_bound;
    let root_cutoff = delivery_cutoff - top_hold;
    let mut lossless = LosslessCheck {
        unexpected: run.unexpected_root_leaves,
        ..LosslessCheck::default()
    };
    let mut superseded = 0;
    for key in &run.emission_order {
        let e = &run.emissions[key];
        let emitted_at = key.1 as Micros * 1000;
        if e.superseded {
            superseded += 1;
            if e.root_count > 0 {
                lossless.unexpected += e.root_count;
            }
            continue;
        }
        if e.root_count > 1 {
            lossless.duplicated += e.root_count - 1;
        }
        if emitted_at <= delivery_cutoff && e.deliveries != 1 {
            lossless.delivery_mismatches += 1;
        }
        if emitted_at <= root_cutoff {
            lossless.checked += 1;
            if e.root_count == 0 {
                lossless.missing += 1;
            }
        }
    }

    let emissions = run
        .emission_order
        .iter()
        .map(|key| Emitted {
            service_id: key.0.clone(),
            emitted_at: key.1 as Micros * 1000,
            superseded: run.emissions[key].superseded,
        })
        .collect();
    Ok(SimTrace {
        max_observed_prop: run.deliveries.iter().map(|d| d.propagation).max(),
        deliveries: run.deliveries,
        machines,
        analytic_bound,
        staleness_bound,
        timings,
        saturated_levels,
        saturated_messages: run.saturated_messages,
        root_flushes: run.root_flushes,
        emitted: run.emission_order.len(),
        superseded,
        lossless,
        emissions,
        root_leaves: run.root_leaves,
        root_cutoff,
    })
}

/// One-line human summary of a trace.
pub fn summary(trace: &SimTrace) -> String {
    let bound = match trace.analytic_bound {
        LatencyBound::Finite(b) => format_micros_as_secs(b),
        LatencyBound::Saturated => "saturated".into(),
    };
    let max = trace
        .max_observed_prop
        .map_or_else(|| "none".into(), format_micros_as_secs);
    let verdict = match verify_against_model(trace) {
        Ok(v) => format!("bound_respected={} tightness={:.4}", v.bound_respected, v.tightness),
        Err(e) => format!("bound_respected=n/a ({e})"),
    };
    format!(
        "max_propagation_s={max} bound_s={bound} {verdict} lossless={} checked={} emitted={} superseded={} deliveries={} root_flushes={}",
        trace.lossless.is_lossless(),
        trace.lossless.checked,
        trace.emitted,
        trace.superseded,
        trace.deliveries.len(),
        trace.root_flushes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HierarchyConfig;

    const S: Micros = 1_000_000;

    fn hierarchy(fanout: Vec<u64>, hold_s: &[i64], period_s: i64) -> Hierarchy {
        HierarchyConfig {
            depth: fanout.len() - 1,
            fanout,
            hold: hold_s.iter().map(|h| h * S).collect(),
            service_period: period_s * S,
        }
    }

    #[test]
    fn single_service_zero_cost() {
        let mut cfg = SimConfig::new(hierarchy(vec![1, 1], &[60, 30], 10), Coefficients::zero());
        cfg.coeffs.parse_s_per_kb = 1e-12;
        cfg.coeffs.net_latency_s = 0.005;
        cfg.jitter_fraction = 0.5;
        cfg.seed = 3;
        let trace = run(&cfg).unwrap();
        assert!(!trace.deliveries.is_empty());
        for d in &trace.deliveries {
            assert!(d.propagation <= 60 * S + 5_000 + 1, "{d:?}");
            assert_eq!(d.level_path, vec!["channel-L1-000000".to_owned()]);
        }
        assert!(trace.lossless.is_lossless(), "{:?}", trace.lossless);
    }

    #[test]
    fn same_seed_same_trace() {
        let mut cfg = SimConfig::new(
            hierarchy(vec![2, 5, 3], &[30, 30, 30], 30),
            Coefficients::synthetic_defaults(),
        );
        cfg.jitter_fraction = 0.9;
        cfg.seed = 42;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.deliveries_csv(), b.deliveries_csv());
        cfg.seed = 43;
        assert_ne!(run(&cfg).unwrap().deliveries_csv(), a.deliveries_csv());
    }

    #[test]
    fn root_flush_count() {
        let mut cfg = SimConfig::new(
            hierarchy(vec![1, 4, 2], &[30, 30, 40], 30),
            Coefficients::synthetic_defaults(),
        );
        cfg.duration = 3 * 100 * S + 17 * S;
        let trace = run(&cfg).unwrap();
        assert_eq!(trace.root_flushes, (cfg.duration / (40 * S)) as u64);
    }

    #[test]
    fn config_errors() {
        let base = SimConfig::new(hierarchy(vec![1, 4], &[30, 30], 30), Coefficients::synthetic_defaults());
        let mut c = base.clone();
        c.duration = 10 * S;
        assert!(matches!(run(&c), Err(SimError::DurationTooShort { .. })));
        let mut c = base.clone();
        c.jitter_fraction = 1.0;
        assert_eq!(run(&c), Err(SimError::InvalidJitter(1.0)));
        let mut c = base.clone();
        c.hierarchy.hold[0] += 1;
        assert!(matches!(run(&c), Err(SimError::NotMillisecondAligned(_))));
        let mut c = base;
        c.hierarchy.fanout[1] = 0;
        assert!(matches!(run(&c), Err(SimError::InvalidHierarchy(_))));
    }

    #[test]
    fn saturated_run_still_returns_trace() {
        // 300 machines at 0.054 s each per second of sensor period: far past U = 1.
        let cfg = SimConfig::new(hierarchy(vec![1, 300], &[1, 1], 1), Coefficients::synthetic_defaults());
        let trace = run(&cfg).unwrap();
        assert_eq!(trace.saturation(), Err(SimError::SaturatedTopology(vec![1])));
        assert!(trace.analytic_bound.is_saturated());
        assert!(trace.saturated_messages > 0);
        assert!(matches!(verify_against_model(&trace), Err(SimError::NotComparable(_))));
    }

    #[test]
    fn generated_sizes_grow_per_level() {
        let sizes = generated_report_sizes(&hierarchy(vec![1, 50, 8], &[30, 30, 30], 30), 0);
        assert!((sizes[0] - 0.5).abs() < 0.0625);
        assert!(sizes[1] > 50.0 * sizes[0]);
        assert!(sizes[2] > 8.0 * sizes[1]);
    }

    #[test]
    fn csv_headers() {
        let cfg = SimConfig::new(hierarchy(vec![1, 2], &[30, 30], 30), Coefficients::synthetic_defaults());
        let trace = run(&cfg).unwrap();
        assert!(trace
            .deliveries_csv()
            .starts_with("service_id,emitted_at_us,arrived_root_at_us,propagation_us\n"));
        let machines = trace.machines_csv();
        assert!(machines.starts_with("channel_id,level,utilization\n"));
        assert_eq!(machines.lines().count(), 1 + 2 + 1);
    }
}
