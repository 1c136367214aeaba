//! Sensor and Monitoring EventChannel roles as deterministic state machines.
//!
//! Nothing here owns a clock: the simulator calls these methods at the event
//! times it schedules. Timers start at zero and first fire one holding time
//! later, so the worst-case wait in any window is exactly one holding time.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::report::{aggregate_with_superseded, make_node_report, Report, ReportGenerator, ReportKind, ServiceReport};
use crate::Micros;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("service {0:?} is not registered on this sensor")]
    UnknownService(String),
    #[error("level-{report_level} report cannot be published to a level-{channel_level} channel")]
    LevelMismatch { channel_level: usize, report_level: usize },
}

fn to_ms(us: Micros) -> u64 {
    (us.max(0) / 1000) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoleEventKind {
    AppServiceTick,
    SensorFlush,
    ChannelArrival,
    ChannelFlush,
    ForwardDeparture,
}

/// One step for a role state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleEvent {
    pub kind: RoleEventKind,
    pub at: Micros,
    pub payload: Option<Report>,
}

/// Per-machine collector of service reports.
#[derive(Debug, Clone)]
pub struct SensorState {
    machine_id: String,
    app_services: Vec<(String, Micros)>,
    hold: Micros,
    next_flush_at: Micros,
    pending: BTreeMap<String, ServiceReport>,
    generator: ReportGenerator,
}

impl SensorState {
    /// `app_services` lists `(service_id, reporting period)`; `hold` is the
    /// Sensor's publishing period.
    pub fn new(machine_id: impl Into<String>, app_services: Vec<(String, Micros)>, hold: Micros) -> Self {
        assert!(hold > 0, "sensor hold must be positive");
        Self {
            machine_id: machine_id.into(),
            app_services,
            hold,
            next_flush_at: hold,
            pending: BTreeMap::new(),
            generator: ReportGenerator::default(),
        }
    }

    pub fn with_generator(mut self, generator: ReportGenerator) -> Self {
        self.generator = generator;
        self
    }

    pub fn machine_id(&self) -> &str {
        &self.machine_id
    }

    pub fn app_services(&self) -> &[(String, Micros)] {
        &self.app_services
    }

    pub fn hold(&self) -> Micros {
        self.hold
    }

    pub fn next_flush_at(&self) -> Micros {
        self.next_flush_at
    }

    pub fn pending(&self) -> impl Iterator<Item = &ServiceReport> {
        self.pending.values()
    }

    /// Records a fresh report from `service_id`. Returns the report it
    /// replaced, if one was still pending.
    pub fn on_app_tick(&mut self, service_id: &str, now: Micros) -> Result<Option<ServiceReport>, ChannelError> {
        let period = self
            .app_services
            .iter()
            .find(|(id, _)| id == service_id)
            .map(|(_, p)| *p)
            .ok_or_else(|| ChannelError::UnknownService(service_id.to_owned()))?;
        let report = self
            .generator
            .service_report(service_id, &self.machine_id, period, to_ms(now));
        match self.pending.get(service_id) {
            Some(old) if old.generated_at_ms() > report.generated_at_ms() => Ok(Some(report)),
            _ => Ok(self.pending.insert(service_id.to_owned(), report)),
        }
    }

    /// Publishes everything pending as one node report, or nothing for an
    /// empty window. Advances the flush timer either way.
    pub fn flush(&mut self, now: Micros) -> Option<Report> {
        debug_assert_eq!(now, self.next_flush_at, "sensor flushed off schedule");
        self.next_flush_at += self.hold;
        if self.pending.is_empty() {
            return None;
        }
        let reports = std::mem::take(&mut self.pending).into_values().collect();
        Some(make_node_report(&self.machine_id, reports, to_ms(now)).expect("pending reports share this machine"))
    }
}

/// Subscriber of one channel and publisher to its parent. Holds no buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forwarder {
    pub id: String,
    pub parent_channel: Option<String>,
}

/// A Monitoring EventChannel with its bound Aggregator (the interpreter) and
/// Forwarder.
#[derive(Debug, Clone)]
pub struct ChannelState {
    channel_id: String,
    level: usize,
    output_kind: ReportKind,
    buffer: Vec<(Report, Micros)>,
    hold: Micros,
    subscribers: Vec<String>,
    forwarder: Forwarder,
    next_flush_at: Micros,
}

impl ChannelState {
    /// A level-`level` channel. `is_root` selects system rather than
    /// intermediate output.
    pub fn new(
        channel_id: impl Into<String>,
        level: usize,
        hold: Micros,
        is_root: bool,
        parent_channel: Option<String>,
    ) -> Self {
        assert!(level >= 1, "channels live on aggregation levels >= 1");
        assert!(hold > 0, "channel hold must be positive");
        let channel_id = channel_id.into();
        let forwarder = Forwarder {
            id: format!("{channel_id}/forwarder"),
            parent_channel,
        };
        Self {
            subscribers: vec![forwarder.id.clone()],
            forwarder,
            channel_id,
            level,
            output_kind: if is_root {
                ReportKind::System
            } else {
                ReportKind::Intermediate
            },
            buffer: Vec::new(),
            hold,
            next_flush_at: hold,
        }
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn hold(&self) -> Micros {
        self.hold
    }

    pub fn next_flush_at(&self) -> Micros {
        self.next_flush_at
    }

    pub fn buffer(&self) -> &[(Report, Micros)] {
        &self.buffer
    }

    pub fn subscribers(&self) -> &[String] {
        &self.subscribers
    }

    pub fn forwarder(&self) -> &Forwarder {
        &self.forwarder
    }

    pub fn on_publish(&mut self, report: Report, now: Micros) -> Result<(), ChannelError> {
        if report.level() >= self.level {
            return Err(ChannelError::LevelMismatch {
                channel_level: self.level,
                report_level: report.level(),
            });
        }
        self.buffer.push((report, now));
        Ok(())
    }

    /// Aggregates every report that arrived strictly before `now`. Arrivals
    /// at exactly `now` stay buffered for the next window.
    pub fn flush(&mut self, now: Micros) -> Option<Report> {
        self.flush_detailed(now).report
    }

    /// [`ChannelState::flush`], also returning reports dropped because a
    /// newer report from the same source arrived in the same window.
    pub fn flush_detailed(&mut self, now: Micros) -> Flushed {
        debug_assert_eq!(now, self.next_flush_at, "channel flushed off schedule");
        self.next_flush_at += self.hold;
        let (window, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.buffer)
            .into_iter()
            .partition(|(_, arrived)| *arrived < now);
        self.buffer = later;
        if window.is_empty() {
            return Flushed::default();
        }
        let reports = window.into_iter().map(|(r, _)| r).collect();
        let (report, superseded) = aggregate_with_superseded(reports, self.output_kind, &self.channel_id, to_ms(now))
            .expect("buffered reports are non-empty and below this level");
        Flushed {
            report: Some(report),
            superseded,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Flushed {
    pub report: Option<Report>,
    pub superseded: Vec<Report>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{aggregate, ReportGenerator};

    const S: Micros = 1_000_000;

    fn sensor(services: usize) -> SensorState {
        let svcs = (0..services).map(|i| (format!("m/s{i}"), 10 * S)).collect();
        SensorState::new("m", svcs, 30 * S)
    }

    #[test]
    fn first_tick_adds_pending() {
        let mut s = sensor(2);
        assert_eq!(s.on_app_tick("m/s0", 1000).unwrap(), None);
        assert_eq!(s.pending().count(), 1);
    }

    #[test]
    fn later_tick_replaces_pending() {
        let mut s = sensor(1);
        s.on_app_tick("m/s0", 1_000).unwrap();
        let replaced = s.on_app_tick("m/s0", 5_000).unwrap().unwrap();
        assert_eq!(replaced.generated_at_ms(), 1);
        let pending: Vec<_> = s.pending().collect();
        assert_eq!(pending.len(), 1);
        assert_eq!(pending[0].generated_at_ms(), 5);
    }

    #[test]
    fn unknown_service_tick() {
        assert_eq!(
            sensor(1).on_app_tick("nope", 0),
            Err(ChannelError::UnknownService("nope".into()))
        );
    }

    #[test]
    fn flush_emits_then_clears() {
        let mut s = sensor(10);
        for i in 0..10 {
            s.on_app_tick(&format!("m/s{i}"), 1_000 * i).unwrap();
        }
        let r = s.flush(30 * S).unwrap();
        assert_eq!(r.leaf_count(), 10);
        assert_eq!(r.kind(), ReportKind::Node);
        assert_eq!(s.flush(60 * S), None);
        assert_eq!(s.next_flush_at(), 90 * S);
    }

    #[test]
    fn empty_sensor_window_emits_nothing() {
        assert_eq!(sensor(3).flush(30 * S), None);
    }

    #[test]
    fn publish_level_checks() {
        let g = ReportGenerator::default();
        let mut l1 = ChannelState::new("c1", 1, 30 * S, false, Some("root".into()));
        l1.on_publish(g.node_report(0, 0), 0).unwrap();
        let sys = aggregate(vec![g.node_report(1, 0)], ReportKind::System, "r", 0).unwrap();
        assert_eq!(
            l1.on_publish(sys, 0),
            Err(ChannelError::LevelMismatch {
                channel_level: 1,
                report_level: 1
            })
        );
        for i in 1..50 {
            l1.on_publish(g.node_report(i, 0), 1).unwrap();
        }
        assert_eq!(l1.buffer().len(), 50);
        assert_eq!(l1.subscribers(), ["c1/forwarder".to_owned()]);
    }

    #[test]
    fn flush_aggregates_window() {
        let g = ReportGenerator::default();
        let mut c = ChannelState::new("c1", 1, 30 * S, false, None);
        for i in 0..3 {
            c.on_publish(g.node_report(i, 0), 10).unwrap();
        }
        let out = c.flush(30 * S).unwrap();
        assert_eq!(out.kind(), ReportKind::Intermediate);
        assert_eq!(out.leaf_count(), 3);
        assert!(c.buffer().is_empty());
        assert_eq!(c.flush(60 * S), None);
        assert_eq!(c.next_flush_at(), 90 * S);
    }

    #[test]
    fn root_flush_is_system_report() {
        let g = ReportGenerator::default();
        let mut c = ChannelState::new("root", 2, 30 * S, true, None);
        let mid = aggregate(vec![g.node_report(0, 0)], ReportKind::Intermediate, "c1", 0).unwrap();
        c.on_publish(mid, 5).unwrap();
        assert_eq!(c.flush(30 * S).unwrap().kind(), ReportKind::System);
    }

    #[test]
    fn arrival_at_flush_time_goes_to_next_window() {
        let g = ReportGenerator::default();
        let mut c = ChannelState::new("c1", 1, 30 * S, false, None);
        c.on_publish(g.node_report(0, 0), 30 * S).unwrap();
        assert_eq!(c.flush(30 * S), None);
        assert_eq!(c.flush(60 * S).unwrap().leaf_count(), 1);
    }

    #[test]
    fn flush_reports_superseded_children() {
        let g = ReportGenerator::default();
        let mut c = ChannelState::new("c1", 1, 30 * S, false, None);
        c.on_publish(g.node_report(0, 10_000), 10 * S).unwrap();
        c.on_publish(g.node_report(0, 20_000), 20 * S).unwrap();
        let out = c.flush_detailed(30 * S);
        assert_eq!(out.report.unwrap().leaf_count(), 1);
        assert_eq!(out.superseded.len(), 1);
        assert_eq!(out.superseded[0].generated_at_ms(), 10_000);
    }
}
