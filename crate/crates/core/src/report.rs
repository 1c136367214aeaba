//! Recursive XML monitoring reports.
//!
//! A node report holds the service reports of one machine; intermediate and
//! system reports hold lower-level reports verbatim, so the leaves of any
//! report are exactly the service reports it was built from.
//!
//! Wire format (single line, attributes in this order, no namespaces):
//!
//! ```text
//! <report kind="node" source="m1" generated-at-ms="10000">
//!   <service-report service="m1/s0" source="m1" period-s="10" generated-at-ms="9000">
//!     <metric name="cpu" value="0.5"/>
//!   </service-report>
//! </report>
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::num::{format_micros_as_secs, parse_secs_to_micros};
use crate::Micros;

/// Serialized size of the reference node report, in bytes.
pub const NODE_REPORT_BYTES: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("no reports in window")]
    EmptyWindow,
    #[error("service report from {found} in node report for {expected}")]
    SourceMismatch { expected: String, found: String },
    #[error("cannot place {child} report under {parent} report")]
    LevelMismatch { parent: ReportKind, child: ReportKind },
    #[error("invalid service report: {0}")]
    InvalidServiceReport(String),
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// Data from a single Application service for one reporting period.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceReport {
    service_id: String,
    source_machine: String,
    period: Micros,
    generated_at_ms: u64,
    metrics: Vec<Metric>,
}

impl ServiceReport {
    pub fn new(
        service_id: impl Into<String>,
        source_machine: impl Into<String>,
        period: Micros,
        generated_at_ms: u64,
        metrics: Vec<Metric>,
    ) -> Result<Self, ReportError> {
        let report = Self {
            service_id: service_id.into(),
            source_machine: source_machine.into(),
            period,
            generated_at_ms,
            metrics,
        };
        report.check().map_err(ReportError::InvalidServiceReport)?;
        Ok(report)
    }

    fn check(&self) -> Result<(), String> {
        if self.service_id.is_empty() {
            return Err("empty service id".into());
        }
        if self.source_machine.is_empty() {
            return Err("empty source machine".into());
        }
        if self.period <= 0 {
            return Err(format!("period must be > 0, got {}us", self.period));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.metrics {
            if !seen.insert(m.name.as_str()) {
                return Err(format!("duplicate metric {}", m.name));
            }
            if !m.value.is_finite() {
                return Err(format!("metric {} is not finite", m.name));
            }
        }
        Ok(())
    }

    pub fn service_id(&self) -> &str {
        &self.service_id
    }

    pub fn source_machine(&self) -> &str {
        &self.source_machine
    }

    pub fn period(&self) -> Micros {
        self.period
    }

    pub fn generated_at_ms(&self) -> u64 {
        self.generated_at_ms
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }
}

/// Aggregation level of a [`Report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReportKind {
    Node,
    Intermediate,
    System,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Node => "node",
            ReportKind::Intermediate => "intermediate",
            ReportKind::System => "system",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportKind {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "node" => Ok(ReportKind::Node),
            "intermediate" => Ok(ReportKind::Intermediate),
            "system" => Ok(ReportKind::System),
            other => Err(ReportError::SchemaViolation(format!("unknown report kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Children {
    Services(Vec<ServiceReport>),
    Reports(Vec<Report>),
}

/// A node, intermediate or distributed-system report. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    kind: ReportKind,
    source: String,
    generated_at_ms: u64,
    height: usize,
    children: Children,
}

fn height_of(children: &[Report]) -> usize {
    1 + children.iter().map(|r| r.height).max().unwrap_or(0)
}

/// Keeps the latest item per key. Ties go to the later-arriving item; the
/// survivor takes the slot of the first item seen with that key.
fn latest_per_key<T>(items: Vec<T>, key: impl Fn(&T) -> &str, stamp: impl Fn(&T) -> u64) -> (Vec<T>, Vec<T>) {
    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    for item in items {
        match slots.get(key(&item)) {
            Some(&i) => {
                if stamp(&item) >= stamp(&out[i]) {
                    dropped.push(std::mem::replace(&mut out[i], item));
                } else {
                    dropped.push(item);
                }
            }
            None => {
                slots.insert(key(&item).to_owned(), out.len());
                out.push(item);
            }
        }
    }
    (out, dropped)
}

/// Builds the node report of machine `source` from its pending service reports.
pub fn make_node_report(source: &str, service_reports: Vec<ServiceReport>, now_ms: u64) -> Result<Report, ReportError> {
    if service_reports.is_empty() {
        return Err(ReportError::EmptyWindow);
    }
    if let Some(bad) = service_reports.iter().find(|r| r.source_machine != source) {
        return Err(ReportError::SourceMismatch {
            expected: source.to_owned(),
            found: bad.source_machine.clone(),
        });
    }
    let (services, _) = latest_per_key(service_reports, |r| &r.service_id, |r| r.generated_at_ms);
    Ok(Report {
        kind: ReportKind::Node,
        source: source.to_owned(),
        generated_at_ms: now_ms,
        height: 0,
        children: Children::Services(services),
    })
}

/// Merges lower-level reports into one `kind` report emitted by `source`.
/// Children from the same source are deduplicated latest-wins.
pub fn aggregate(children: Vec<Report>, kind: ReportKind, source: &str, now_ms: u64) -> Result<Report, ReportError> {
    if children.is_empty() {
        return Err(ReportError::EmptyWindow);
    }
    Ok(aggregate_with_superseded(children, kind, source, now_ms)?.0)
}

/// [`aggregate`] that also hands back the children dropped by latest-wins
/// deduplication, in input order.
pub fn aggregate_with_superseded(
    children: Vec<Report>,
    kind: ReportKind,
    source: &str,
    now_ms: u64,
) -> Result<(Report, Vec<Report>), ReportError> {
    if children.is_empty() {
        return Err(ReportError::EmptyWindow);
    }
    for child in &children {
        check_nesting(kind, child.kind)?;
    }
    let (children, dropped) = latest_per_key(children, |r| &r.source, |r| r.generated_at_ms);
    let report = Report {
        kind,
        source: source.to_owned(),
        generated_at_ms: now_ms,
        height: height_of(&children),
        children: Children::Reports(children),
    };
    Ok((report, dropped))
}

fn check_nesting(parent: ReportKind, child: ReportKind) -> Result<(), ReportError> {
    let ok = match parent {
        ReportKind::Node => false,
        ReportKind::Intermediate | ReportKind::System => child != ReportKind::System,
    };
    if ok {
        Ok(())
    } else {
        Err(ReportError::LevelMismatch { parent, child })
    }
}

impl Report {
    pub fn kind(&self) -> ReportKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn generated_at_ms(&self) -> u64 {
        self.generated_at_ms
    }

    pub fn children(&self) -> &Children {
        &self.children
    }

    /// Height of the aggregation tree: 0 for a node report, one more than
    /// the tallest child otherwise.
    pub fn level(&self) -> usize {
        self.height
    }

    pub fn leaf_count(&self) -> usize {
        match &self.children {
            Children::Services(s) => s.len(),
            Children::Reports(rs) => rs.iter().map(Report::leaf_count).sum(),
        }
    }

    /// Visits every service report contained in this report, depth first.
    pub fn for_each_leaf<'a>(&'a self, f: &mut impl FnMut(&'a ServiceReport)) {
        match &self.children {
            Children::Services(s) => s.iter().for_each(f),
            Children::Reports(rs) => rs.iter().for_each(|r| r.for_each_leaf(f)),
        }
    }

    pub fn leaves(&self) -> Vec<&ServiceReport> {
        let mut out = Vec::with_capacity(self.leaf_count());
        self.for_each_leaf(&mut |s| out.push(s));
        out
    }
}

/// Size of a serialized report, also expressed in reference node reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportSize {
    pub bytes: usize,
    pub node_report_units: f64,
}

impl ReportSize {
    pub fn from_bytes(bytes: usize) -> Self {
        Self {
            bytes,
            node_report_units: bytes as f64 / NODE_REPORT_BYTES as f64,
        }
    }

    pub fn kb(&self) -> f64 {
        self.bytes as f64 / 1024.0
    }
}

pub fn measure(report: &Report) -> ReportSize {
    ReportSize::from_bytes(serialize(report).len())
}

fn format_value(v: f64) -> String {
    // `Display` for f64 is the shortest string that parses back to the same bits.
    format!("{v}")
}

fn write_report(out: &mut String, r: &Report) {
    let _ = write!(
        out,
        r#"<report kind="{}" source="{}" generated-at-ms="{}">"#,
        r.kind,
        escape(r.source.as_str()),
        r.generated_at_ms
    );
    match &r.children {
        Children::Services(services) => {
            for s in services {
                let _ = write!(
                    out,
                    r#"<service-report service="{}" source="{}" period-s="{}" generated-at-ms="{}">"#,
                    escape(s.service_id.as_str()),
                    escape(s.source_machine.as_str()),
                    format_micros_as_secs(s.period),
                    s.generated_at_ms
                );
                for m in &s.metrics {
                    let _ = write!(
                        out,
                        r#"<metric name="{}" value="{}"/>"#,
                        escape(m.name.as_str()),
                        format_value(m.value)
                    );
                }
                out.push_str("</service-report>");
            }
        }
        Children::Reports(children) => {
            for c in children {
                write_report(out, c);
            }
        }
    }
    out.push_str("</report>");
}

/// Serializes a report to single-line UTF-8 XML. Deterministic.
pub fn serialize(report: &Report) -> Vec<u8> {
    let mut out = String::with_capacity(NODE_REPORT_BYTES * report.leaf_count().max(1));
    write_report(&mut out, report);
    out.into_bytes()
}

enum Frame {
    Report {
        kind: ReportKind,
        source: String,
        generated_at_ms: u64,
        services: Vec<ServiceReport>,
        reports: Vec<Report>,
    },
    Service(ServiceReport),
}

fn malformed(e: impl fmt::Display) -> ReportError {
    ReportError::MalformedXml(e.to_string())
}

fn schema(msg: impl Into<String>) -> ReportError {
    ReportError::SchemaViolation(msg.into())
}

fn attributes(e: &BytesStart<'_>, reader: &Reader<&[u8]>, expected: &[&str]) -> Result<Vec<String>, ReportError> {
    let mut values: Vec<Option<String>> = vec![None; expected.len()];
    for attr in e.attributes() {
        let attr = attr.map_err(malformed)?;
        let key = std::str::from_utf8(attr.key.as_ref()).map_err(malformed)?;
        let slot = expected
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| schema(format!("unknown attribute {key:?}")))?;
        if values[slot].is_some() {
            return Err(malformed(format!("duplicate attribute {key:?}")));
        }
        let value = attr.decode_and_unescape_value(reader.decoder()).map_err(malformed)?;
        values[slot] = Some(value.into_owned());
    }
    values
        .into_iter()
        .zip(expected)
        .map(|(v, k)| v.ok_or_else(|| schema(format!("missing attribute {k:?}"))))
        .collect()
}

fn parse_u64(text: &str, what: &str) -> Result<u64, ReportError> {
    text.parse()
        .map_err(|_| schema(format!("{what}: not an integer: {text:?}")))
}

fn open_report(e: &BytesStart<'_>, reader: &Reader<&[u8]>) -> Result<Frame, ReportError> {
    let a = attributes(e, reader, &["kind", "source", "generated-at-ms"])?;
    Ok(Frame::Report {
        kind: a[0].parse()?,
        source: a[1].clone(),
        generated_at_ms: parse_u64(&a[2], "generated-at-ms")?,
        services: Vec::new(),
        reports: Vec::new(),
    })
}

fn open_service(e: &BytesStart<'_>, reader: &Reader<&[u8]>) -> Result<ServiceReport, ReportError> {
    let a = attributes(e, reader, &["service", "source", "period-s", "generated-at-ms"])?;
    let period = parse_secs_to_micros(&a[2]).ok_or_else(|| schema(format!("period-s: not a duration: {:?}", a[2])))?;
    // Metrics are checked when the element closes.
    Ok(ServiceReport {
        service_id: a[0].clone(),
        source_machine: a[1].clone(),
        period,
        generated_at_ms: parse_u64(&a[3], "generated-at-ms")?,
        metrics: Vec::new(),
    })
}

fn parse_metric(e: &BytesStart<'_>, reader: &Reader<&[u8]>) -> Result<Metric, ReportError> {
    let a = attributes(e, reader, &["name", "value"])?;
    let value: f64 = a[1]
        .parse()
        .map_err(|_| schema(format!("metric value not a number: {:?}", a[1])))?;
    Ok(Metric {
        name: a[0].clone(),
        value,
    })
}

fn close_report(frame: Frame) -> Result<Report, ReportError> {
    let Frame::Report {
        kind,
        source,
        generated_at_ms,
        services,
        reports,
    } = frame
    else {
        unreachable!("close_report called on a service frame")
    };
    let (height, children) = match kind {
        ReportKind::Node => {
            if services.is_empty() {
                return Err(schema("node report without service reports"));
            }
            (0, Children::Services(services))
        }
        _ => {
            if reports.is_empty() {
                return Err(schema(format!("{kind} report without child reports")));
            }
            (height_of(&reports), Children::Reports(reports))
        }
    };
    Ok(Report {
        kind,
        source,
        generated_at_ms,
        height,
        children,
    })
}

fn close_service(frame: Frame) -> Result<ServiceReport, ReportError> {
    let Frame::Service(s) = frame else {
        unreachable!("close_service called on a report frame")
    };
    s.check().map_err(schema)?;
    Ok(s)
}

/// Attaches a finished element to the enclosing frame, enforcing nesting rules.
fn attach(stack: &mut [Frame], done: Done, root: &mut Option<Report>) -> Result<(), ReportError> {
    match (stack.last_mut(), done) {
        (None, Done::Report(r)) => {
            if root.is_some() {
                return Err(schema("more than one root element"));
            }
            *root = Some(r);
        }
        (None, Done::Service(_)) => return Err(schema("service-report outside a report")),
        (Some(Frame::Report { kind, services, .. }), Done::Service(s)) => {
            if *kind != ReportKind::Node {
                return Err(schema(format!("service-report inside {kind} report")));
            }
            services.push(s);
        }
        (Some(Frame::Report { kind, reports, .. }), Done::Report(r)) => {
            check_nesting(*kind, r.kind).map_err(|e| schema(e.to_string()))?;
            reports.push(r);
        }
        (Some(Frame::Service(_)), _) => return Err(schema("element inside service-report")),
    }
    Ok(())
}

enum Done {
    Report(Report),
    Service(ServiceReport),
}

/// Parses a report produced by [`serialize`]. Whitespace between elements and
/// an XML declaration are tolerated.
pub fn parse(bytes: &[u8]) -> Result<Report, ReportError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<Frame> = Vec::new();
    let mut root: Option<Report> = None;
    loop {
        let event = reader.read_event().map_err(malformed)?;
        match event {
            Event::Start(e) => {
                if root.is_some() {
                    return Err(schema("content after root element"));
                }
                match e.name().as_ref() {
                    b"report" => {
                        let frame = open_report(&e, &reader)?;
                        if let Some(Frame::Report {
                            kind: ReportKind::Node, ..
                        }) = stack.last()
                        {
                            return Err(schema("report nested inside a node report"));
                        }
                        stack.push(frame);
                    }
                    b"service-report" => stack.push(Frame::Service(open_service(&e, &reader)?)),
                    b"metric" => return Err(schema("metric element must be empty")),
                    other => return Err(schema(format!("unknown element {:?}", String::from_utf8_lossy(other)))),
                }
            }
            Event::Empty(e) => match e.name().as_ref() {
                b"metric" => match stack.last_mut() {
                    Some(Frame::Service(s)) => s.metrics.push(parse_metric(&e, &reader)?),
                    _ => return Err(schema("metric outside service-report")),
                },
                b"service-report" => {
                    let s = open_service(&e, &reader)?;
                    attach(&mut stack, Done::Service(s), &mut root)?;
                }
                b"report" => return Err(schema("report without children")),
                other => return Err(schema(format!("unknown element {:?}", String::from_utf8_lossy(other)))),
            },
            Event::End(e) => {
                let frame = stack.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                let done = match (e.name().as_ref(), frame) {
                    (b"report", f @ Frame::Report { .. }) => Done::Report(close_report(f)?),
                    (b"service-report", f @ Frame::Service(_)) => Done::Service(close_service(f)?),
                    _ => return Err(malformed("mismatched end tag")),
                };
                attach(&mut stack, done, &mut root)?;
            }
            Event::Text(t) => {
                if !t.iter().all(|b| b.is_ascii_whitespace()) {
                    return Err(schema("unexpected text content"));
                }
            }
            Event::CData(_) => return Err(schema("unexpected CDATA")),
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(malformed("unexpected end of document"));
    }
    root.ok_or_else(|| malformed("empty document"))
}

/// Deterministic producer of realistic reports for tests, calibration and the
/// simulator.
#[derive(Debug, Clone)]
pub struct ReportGenerator {
    /// Metrics per service report.
    pub metrics_per_service: usize,
}

impl Default for ReportGenerator {
    fn default() -> Self {
        Self { metrics_per_service: 8 }
    }
}

const METRIC_NAMES: [&str; 8] = [
    "cpu.user", "cpu.sys", "mem.used", "mem.free", "req.rate", "req.lat", "req.err", "threads",
];

/// Zero-padded machine id; all ids of a generator run share one length.
pub fn machine_id(index: u64) -> String {
    format!("machine-{index:06}")
}

pub fn service_id(machine: &str, index: u64) -> String {
    format!("{machine}/svc-{index:03}")
}

impl ReportGenerator {
    fn metric_value(seed: u64, i: usize) -> f64 {
        // Quarter steps keep the printed form short and exact.
        let x = (seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((x >> 33) % 4000) as f64 / 4.0
    }

    pub fn service_report(
        &self,
        service_id: &str,
        machine: &str,
        period: Micros,
        generated_at_ms: u64,
    ) -> ServiceReport {
        let seed = generated_at_ms ^ (service_id.len() as u64) << 48;
        let metrics = (0..self.metrics_per_service)
            .map(|i| Metric {
                name: match METRIC_NAMES.get(i) {
                    Some(n) => (*n).to_owned(),
                    None => format!("custom.metric-{i:03}"),
                },
                value: Self::metric_value(seed, i),
            })
            .collect();
        ServiceReport::new(service_id, machine, period, generated_at_ms, metrics)
            .expect("generated service report is valid")
    }

    /// Node report of machine `index` with `services` service reports.
    pub fn node_report_with(&self, index: u64, services: u64, at_ms: u64) -> Report {
        let machine = machine_id(index);
        let reports = (0..services)
            .map(|s| self.service_report(&service_id(&machine, s), &machine, 10_000_000, at_ms))
            .collect();
        make_node_report(&machine, reports, at_ms).expect("generated node report is valid")
    }

    /// Reference node report: one service report with the default metric set.
    pub fn node_report(&self, index: u64, at_ms: u64) -> Report {
        self.node_report_with(index, 1, at_ms)
    }

    /// A report of roughly `size_kb` kilobytes: a single node report for half
    /// a kilobyte or less, otherwise an intermediate report holding
    /// `round(size_kb / 0.5)` node reports.
    pub fn report_of_size_kb(&self, size_kb: f64, at_ms: u64) -> Report {
        let count = (size_kb * 1024.0 / NODE_REPORT_BYTES as f64).round().max(1.0) as u64;
        if count == 1 {
            return self.node_report(0, at_ms);
        }
        let nodes = (0..count).map(|i| self.node_report(i, at_ms)).collect();
        aggregate(nodes, ReportKind::Intermediate, "channel-L1-000000", at_ms)
            .expect("generated intermediate report is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc(id: &str, machine: &str, at: u64) -> ServiceReport {
        ReportGenerator::default().service_report(id, machine, 10_000_000, at)
    }

    #[test]
    fn singleton_node_report() {
        let r = make_node_report("m", vec![svc("m/a", "m", 5)], 10).unwrap();
        assert_eq!(r.leaf_count(), 1);
        assert_eq!(r.kind(), ReportKind::Node);
        assert_eq!(r.generated_at_ms(), 10);
    }

    #[test]
    fn node_report_keeps_latest_in_either_order() {
        for order in [[1_u64, 2], [2, 1]] {
            let reports = order.iter().map(|t| svc("m/a", "m", *t)).collect();
            let r = make_node_report("m", reports, 10).unwrap();
            assert_eq!(r.leaf_count(), 1);
            assert_eq!(r.leaves()[0].generated_at_ms(), 2);
        }
    }

    #[test]
    fn tie_keeps_later_arrival() {
        let mut a = svc("m/a", "m", 3);
        a.metrics[0].value = 1.0;
        let mut b = svc("m/a", "m", 3);
        b.metrics[0].value = 2.0;
        let r = make_node_report("m", vec![a, b], 10).unwrap();
        assert_eq!(r.leaves()[0].metrics()[0].value, 2.0);
    }

    #[test]
    fn node_report_errors() {
        assert_eq!(make_node_report("m", vec![], 1), Err(ReportError::EmptyWindow));
        let err = make_node_report("m", vec![svc("m/a", "m", 1), svc("x/a", "x", 1)], 1);
        assert!(matches!(err, Err(ReportError::SourceMismatch { .. })));
    }

    #[test]
    fn service_report_invariants() {
        assert!(ServiceReport::new("", "m", 1, 0, vec![]).is_err());
        assert!(ServiceReport::new("s", "", 1, 0, vec![]).is_err());
        assert!(ServiceReport::new("s", "m", 0, 0, vec![]).is_err());
        let dup = vec![
            Metric {
                name: "a".into(),
                value: 1.0,
            },
            Metric {
                name: "a".into(),
                value: 2.0,
            },
        ];
        assert!(ServiceReport::new("s", "m", 1, 0, dup).is_err());
    }

    #[test]
    fn aggregate_levels() {
        let g = ReportGenerator::default();
        let node = g.node_report(0, 0);
        let single = aggregate(vec![node.clone()], ReportKind::Intermediate, "c", 1).unwrap();
        assert_eq!(single.leaf_count(), 1);
        assert_eq!(single.level(), 1);
        assert_eq!(
            aggregate(vec![node.clone()], ReportKind::Node, "c", 1),
            Err(ReportError::LevelMismatch {
                parent: ReportKind::Node,
                child: ReportKind::Node
            })
        );
        let sys = aggregate(vec![single], ReportKind::System, "root", 2).unwrap();
        assert!(aggregate(vec![sys], ReportKind::System, "root", 3).is_err());
        assert_eq!(
            aggregate(vec![], ReportKind::System, "root", 3),
            Err(ReportError::EmptyWindow)
        );
    }

    #[test]
    fn two_intermediates_of_ten_make_twenty_leaves() {
        let g = ReportGenerator::default();
        let mk = |base: u64, name: &str| {
            let nodes = (0..10).map(|i| g.node_report(base + i, 0)).collect();
            aggregate(nodes, ReportKind::Intermediate, name, 0).unwrap()
        };
        let sys = aggregate(vec![mk(0, "a"), mk(10, "b")], ReportKind::System, "root", 0).unwrap();
        // Brute-force walk over the structure rather than leaf_count().
        fn walk(r: &Report) -> usize {
            match r.children() {
                Children::Services(s) => s.len(),
                Children::Reports(rs) => rs.iter().map(walk).sum(),
            }
        }
        assert_eq!(walk(&sys), 20);
        assert_eq!(sys.leaf_count(), 20);
    }

    #[test]
    fn aggregate_dedupes_children_by_source() {
        let g = ReportGenerator::default();
        let old = g.node_report(1, 100);
        let new = g.node_report(1, 200);
        let other = g.node_report(2, 150);
        let r = aggregate(vec![old, other, new.clone()], ReportKind::Intermediate, "c", 300).unwrap();
        let Children::Reports(cs) = r.children() else { panic!() };
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0], new);
        // Already deduplicated input is unchanged.
        let again = aggregate(cs.clone(), ReportKind::Intermediate, "c", 300).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn default_node_report_is_half_a_kilobyte() {
        let g = ReportGenerator::default();
        for i in [0, 7, 123_456] {
            for at in [0, 1_700_000_000_000, 99_999] {
                let bytes = serialize(&g.node_report(i, at)).len();
                assert!((448..=576).contains(&bytes), "{bytes}");
            }
        }
    }

    #[test]
    fn fifty_node_reports_are_at_least_25_kb() {
        let g = ReportGenerator::default();
        let nodes: Vec<Report> = (0..50).map(|i| g.node_report(i, 0)).collect();
        let child_bytes: usize = nodes.iter().map(|n| measure(n).bytes).sum();
        let r = aggregate(nodes, ReportKind::Intermediate, "c", 0).unwrap();
        let size = measure(&r);
        assert!(size.bytes >= 25 * 1024 * 9 / 10, "{}", size.bytes);
        assert!(size.bytes > child_bytes);
        assert!((size.node_report_units - 50.0).abs() < 5.0);
    }

    #[test]
    fn sizes_scale_with_node_count() {
        let g = ReportGenerator::default();
        let r30 = g.report_of_size_kb(15.0, 0);
        assert_eq!(r30.leaf_count(), 30);
        let units = measure(&r30).node_report_units;
        assert!((units - 30.0).abs() < 3.0, "{units}");
        assert!((measure(&g.node_report(0, 0)).node_report_units - 1.0).abs() < 0.125);
    }

    #[test]
    fn empty_metrics_is_well_formed() {
        let s = ServiceReport::new("m/a", "m", 1_500_000, 7, vec![]).unwrap();
        let r = make_node_report("m", vec![s], 7).unwrap();
        let xml = serialize(&r);
        assert_eq!(
            String::from_utf8(xml.clone()).unwrap(),
            r#"<report kind="node" source="m" generated-at-ms="7"><service-report service="m/a" source="m" period-s="1.5" generated-at-ms="7"></service-report></report>"#
        );
        assert_eq!(parse(&xml).unwrap(), r);
    }

    #[test]
    fn escapes_attribute_values() {
        let s = ServiceReport::new(
            "a<&>\"'b",
            "m\"",
            1,
            0,
            vec![Metric {
                name: "x&y".into(),
                value: -0.1,
            }],
        )
        .unwrap();
        let r = make_node_report("m\"", vec![s], 0).unwrap();
        assert_eq!(parse(&serialize(&r)).unwrap(), r);
    }

    #[test]
    fn truncated_is_malformed() {
        let xml = serialize(&ReportGenerator::default().node_report(0, 0));
        for cut in [xml.len() - 1, xml.len() / 2, 10] {
            assert!(
                matches!(parse(&xml[..cut]), Err(ReportError::MalformedXml(_))),
                "cut at {cut}"
            );
        }
        assert!(matches!(parse(b""), Err(ReportError::MalformedXml(_))));
    }

    #[test]
    fn schema_violations() {
        let cases: &[&str] = &[
            r#"<report kind="node" source="a" generated-at-ms="1"><report kind="node" source="b" generated-at-ms="1"><service-report service="s" source="b" period-s="1" generated-at-ms="1"/></report></report>"#,
            r#"<report kind="intermediate" source="a" generated-at-ms="1"><service-report service="s" source="a" period-s="1" generated-at-ms="1"/></report>"#,
            r#"<report kind="planet" source="a" generated-at-ms="1"></report>"#,
            r#"<bogus/>"#,
            r#"<report kind="node" source="a"><service-report service="s" source="a" period-s="1" generated-at-ms="1"/></report>"#,
            r#"<report kind="node" source="a" generated-at-ms="1" extra="x"><service-report service="s" source="a" period-s="1" generated-at-ms="1"/></report>"#,
            r#"<report kind="node" source="a" generated-at-ms="1">hello</report>"#,
        ];
        for xml in cases {
            assert!(
                matches!(parse(xml.as_bytes()), Err(ReportError::SchemaViolation(_))),
                "{xml} -> {:?}",
                parse(xml.as_bytes())
            );
        }
    }
}
