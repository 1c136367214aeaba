//! CPU and delay model of a Monitoring EventChannel machine.
//!
//! Every message costs a fixed overhead plus a per-kilobyte term to parse on
//! input and to aggregate and serialize on output. Utilization is the CPU
//! seconds demanded per wall-clock second; input time is inflated by
//! `1 / (1 - U)` and becomes unbounded once the machine saturates. Output time
//! is affine in the size of the outgoing report.
//!
//! Coefficients come either from [`LoadCoefficients::synthetic_defaults`] or
//! from [`measure_costs`] followed by [`fit`] on the current host.

use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::model::{ChannelTimings, HierarchyConfig, LatencyBound};
use crate::num::{secs_to_micros_ceil, Real, MICROS_PER_SEC};
use crate::report::{aggregate, parse, serialize, Children, Report, ReportGenerator, ReportKind};
use crate::{Micros, Timings};

/// Cost parameters, all in seconds (per kilobyte where noted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadCoefficients<F> {
    pub parse_s_per_kb: F,
    pub parse_fixed_s: F,
    pub serialize_s_per_kb: F,
    pub serialize_fixed_s: F,
    pub aggregate_s_per_kb: F,
    pub net_latency_s: F,
    /// True when fitted from on-host measurements.
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoefficientsError {
    #[error("{0} must be >= 0 and finite")]
    Negative(&'static str),
    #[error("parse_s_per_kb must be > 0")]
    ZeroParseSlope,
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing key {0}")]
    MissingKey(&'static str),
}

pub const COEFFICIENT_KEYS: [&str; 7] = [
    "parse_s_per_kb",
    "parse_fixed_s",
    "serialize_s_per_kb",
    "serialize_fixed_s",
    "aggregate_s_per_kb",
    "net_latency_s",
    "calibrated",
];

impl<F: Real> LoadCoefficients<F> {
    /// Synthetic placeholder values used when no calibration has been run.
    /// They are not measurements of any real system: 8 ms/kB + 50 ms to
    /// parse, 2 ms/kB + 10 ms to serialize, 1 ms/kB to aggregate, 5 ms
    /// network floor.
    pub fn synthetic_defaults() -> Self {
        let f = |v: f64| F::from_f64(v).unwrap();
        Self {
            parse_s_per_kb: f(0.008),
            parse_fixed_s: f(0.050),
            serialize_s_per_kb: f(0.002),
            serialize_fixed_s: f(0.010),
            aggregate_s_per_kb: f(0.001),
            net_latency_s: f(0.005),
            calibrated: false,
        }
    }

    pub fn zero() -> Self {
        Self {
            parse_s_per_kb: F::zero(),
            parse_fixed_s: F::zero(),
            serialize_s_per_kb: F::zero(),
            serialize_fixed_s: F::zero(),
            aggregate_s_per_kb: F::zero(),
            net_latency_s: F::zero(),
            calibrated: false,
        }
    }

    fn values(&self) -> [(&'static str, F); 6] {
        [
            ("parse_s_per_kb", self.parse_s_per_kb),
            ("parse_fixed_s", self.parse_fixed_s),
            ("serialize_s_per_kb", self.serialize_s_per_kb),
            ("serialize_fixed_s", self.serialize_fixed_s),
            ("aggregate_s_per_kb", self.aggregate_s_per_kb),
            ("net_latency_s", self.net_latency_s),
        ]
    }

    pub fn validate(&self) -> Result<(), CoefficientsError> {
        for (name, v) in self.values() {
            if !(v >= F::zero()) || !v.is_finite() {
                return Err(CoefficientsError::Negative(name));
            }
        }
        if !(self.parse_s_per_kb > F::zero()) {
            return Err(CoefficientsError::ZeroParseSlope);
        }
        Ok(())
    }
}

impl LoadCoefficients<f64> {
    /// Renders the `key=value` coefficients file.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("calibrated={}\n", self.calibrated));
        out
    }

    /// Parses a coefficients file. Blank lines and `#` comments are ignored;
    /// every key must appear exactly once.
    pub fn from_file_text(text: &str) -> Result<Self, CoefficientsError> {
        let mut found: [Option<String>; 7] = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| CoefficientsError::Syntax { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let slot = COEFFICIENT_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| syntax(format!("unknown key {key:?}")))?;
            if found[slot].replace(value.to_owned()).is_some() {
                return Err(syntax(format!("duplicate key {key:?}")));
            }
        }
        let mut nums = [0.0; 6];
        for (i, slot) in found.iter().take(6).enumerate() {
            let text = slot
                .as_deref()
                .ok_or(CoefficientsError::MissingKey(COEFFICIENT_KEYS[i]))?;
            nums[i] = text.parse().map_err(|_| CoefficientsError::Syntax {
                line: 0,
                message: format!("{}: not a number: {text:?}", COEFFICIENT_KEYS[i]),
            })?;
        }
        let calibrated = match found[6].as_deref() {
            Some("true") => true,
            Some("false") => false,
            Some(other) => {
                return Err(CoefficientsError::Syntax {
                    line: 0,
                    message: format!("calibrated must be true or false, got {other:?}"),
                })
            }
            None => return Err(CoefficientsError::MissingKey("calibrated")),
        };
        let coeffs = Self {
            parse_s_per_kb: nums[0],
            parse_fixed_s: nums[1],
            serialize_s_per_kb: nums[2],
            serialize_fixed_s: nums[3],
            aggregate_s_per_kb: nums[4],
            net_latency_s: nums[5],
            calibrated,
        };
        coeffs.validate()?;
        Ok(coeffs)
    }
}

/// A stream of messages of one size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow<F> {
    pub rate_hz: F,
    pub size_kb: F,
}

impl<F> Flow<F> {
    pub fn new(rate_hz: F, size_kb: F) -> Self {
        Self { rate_hz, size_kb }
    }
}

/// Steady-state traffic through one channel machine.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec<F> {
    pub inputs: Vec<Flow<F>>,
    pub output: Option<Flow<F>>,
}

impl<F: Real> WorkloadSpec<F> {
    /// `count` identical inputs.
    pub fn uniform(count: u64, input: Flow<F>, output: Option<Flow<F>>) -> Self {
        Self {
            inputs: vec![input; count as usize],
            output,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.inputs
            .iter()
            .chain(self.output.iter())
            .all(|f| f.rate_hz > F::zero() && f.size_kb > F::zero())
    }
}

/// CPU seconds demanded per second: parse cost of every input message plus
/// aggregate-and-serialize cost of every output message.
pub fn utilization<F: Real>(spec: &WorkloadSpec<F>, coeffs: &LoadCoefficients<F>) -> F {
    let input = spec.inputs.iter().fold(F::zero(), |acc, f| {
        acc + f.rate_hz * (coeffs.parse_fixed_s + coeffs.parse_s_per_kb * f.size_kb)
    });
    let output = spec.output.map_or(F::zero(), |o| {
        o.rate_hz * (coeffs.serialize_fixed_s + (coeffs.serialize_s_per_kb + coeffs.aggregate_s_per_kb) * o.size_kb)
    });
    input + output
}

/// Delay of a `probe_size_kb` message into a machine at utilization `u`.
pub fn input_time_at<F: Real>(u: F, probe_size_kb: F, coeffs: &LoadCoefficients<F>) -> LatencyBound<F> {
    if u >= F::one() {
        return LatencyBound::Saturated;
    }
    let service = coeffs.parse_fixed_s + coeffs.parse_s_per_kb * probe_size_kb;
    LatencyBound::Finite(coeffs.net_latency_s + service / (F::one() - u))
}

pub fn input_time<F: Real>(spec: &WorkloadSpec<F>, coeffs: &LoadCoefficients<F>, probe_size_kb: F) -> LatencyBound<F> {
    input_time_at(utilization(spec, coeffs), probe_size_kb, coeffs)
}

pub fn output_time<F: Real>(output_size_kb: F, coeffs: &LoadCoefficients<F>) -> F {
    coeffs.net_latency_s + coeffs.serialize_fixed_s + coeffs.serialize_s_per_kb * output_size_kb
}

/// Load on one machine and the delays it imposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineLoad<F> {
    pub utilization: F,
    pub t_in: LatencyBound<F>,
    pub t_out: F,
}

impl<F: Real> MachineLoad<F> {
    pub fn is_saturated(&self) -> bool {
        self.utilization >= F::one()
    }
}

fn secs<F: Real>(us: Micros) -> F {
    F::from_i64(us).unwrap() / F::from_i64(MICROS_PER_SEC).unwrap()
}

/// Size of one level-`i` report when every node report weighs `node_kb`.
pub fn reference_report_sizes<F: Real>(config: &HierarchyConfig<Micros>, node_kb: F) -> Vec<F> {
    (0..=config.depth)
        .map(|i| node_kb * F::from_u64(config.machines_under(i)).unwrap())
        .collect()
}

/// Workload of a level-`level` channel in a balanced tree. `report_kb[i]` is
/// the size of one level-`i` report (`report_kb[0]` is a node report).
pub fn level_workload<F: Real>(config: &HierarchyConfig<Micros>, level: usize, report_kb: &[F]) -> WorkloadSpec<F> {
    let input = Flow::new(F::one() / secs::<F>(config.hold[level - 1]), report_kb[level - 1]);
    let output = Flow::new(F::one() / secs::<F>(config.hold[level]), report_kb[level]);
    WorkloadSpec::uniform(config.fanout[level], input, Some(output))
}

/// Steady-state load of one channel on every aggregation level, index
/// `i - 1` for level `i`.
pub fn hierarchy_loads<F: Real>(
    config: &HierarchyConfig<Micros>,
    coeffs: &LoadCoefficients<F>,
    report_kb: &[F],
) -> Vec<MachineLoad<F>> {
    assert_eq!(report_kb.len(), config.depth + 1, "one report size per level");
    (1..=config.depth)
        .map(|level| {
            let spec = level_workload(config, level, report_kb);
            let u = utilization(&spec, coeffs);
            MachineLoad {
                utilization: u,
                t_in: input_time_at(u, report_kb[level - 1], coeffs),
                t_out: output_time(report_kb[level], coeffs),
            }
        })
        .collect()
}

/// Load of a Sensor machine: it only builds and publishes its node report.
pub fn sensor_utilization<F: Real>(config: &HierarchyConfig<Micros>, coeffs: &LoadCoefficients<F>, node_kb: F) -> F {
    let spec = WorkloadSpec {
        inputs: Vec::new(),
        output: Some(Flow::new(F::one() / secs::<F>(config.hold[0]), node_kb)),
    };
    utilization(&spec, coeffs)
}

/// Converts per-level loads into microsecond timings, rounding delays up.
pub fn timings_from_loads<F: Real>(loads: &[MachineLoad<F>]) -> Timings {
    ChannelTimings {
        t_in: loads
            .iter()
            .map(|l| match l.t_in {
                LatencyBound::Finite(s) => LatencyBound::Finite(secs_to_micros_ceil(s)),
                LatencyBound::Saturated => LatencyBound::Saturated,
            })
            .collect(),
        t_out: loads.iter().map(|l| secs_to_micros_ceil(l.t_out)).collect(),
    }
}

/// Median wall-clock cost of each operation on a report of `size_kb`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample<F> {
    pub size_kb: F,
    pub parse_s: F,
    pub serialize_s: F,
    pub aggregate_s: F,
}

pub const SAMPLES_CSV_HEADER: &str = "size_kb,parse_s,serialize_s,aggregate_s";

/// Renders samples as CSV with a header row and LF line endings.
pub fn samples_to_csv(samples: &[CostSample<f64>]) -> String {
    let mut out = format!("{SAMPLES_CSV_HEADER}\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.size_kb, s.parse_s, s.serialize_s, s.aggregate_s
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("need at least 3 distinct sizes, got {0}")]
    TooFewSizes(usize),
    #[error("sizes must be positive and finite")]
    InvalidSize,
    #[error("need at least 30 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error("unstable timings: {detail}")]
    Unstable {
        detail: String,
        samples: Vec<CostSample<f64>>,
    },
}

pub const MIN_REPETITIONS: usize = 30;
/// Largest tolerated interquartile range, as a fraction of the median.
pub const MAX_RELATIVE_SPREAD: f64 = 0.5;
/// Each timed repetition batches enough operations to run at least this long.
const MIN_SAMPLE_SECS: f64 = 200e-6;

static BENCH_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, Copy)]
struct Summary {
    median: f64,
    spread: f64,
}

fn summarize(mut xs: Vec<f64>) -> Summary {
    xs.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (xs.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
    };
    let median = q(0.5);
    let spread = if median > 0.0 {
        (q(0.75) - q(0.25)) / median
    } else {
        f64::INFINITY
    };
    Summary { median, spread }
}

/// Times `op` `reps` times, each repetition running a batch of operations,
/// and returns per-operation seconds. `setup` builds the input of one
/// operation outside the timed region.
fn time_op<I, O>(reps: usize, mut setup: impl FnMut() -> I, mut op: impl FnMut(I) -> O) -> Summary {
    let probe = {
        let input = setup();
        let start = Instant::now();
        std::hint::black_box(op(input));
        start.elapsed().as_secs_f64()
    };
    let batch = ((MIN_SAMPLE_SECS / probe.max(1e-9)).ceil() as usize).clamp(1, 100_000);
    let per_op = (0..reps)
        .map(|_| {
            let inputs: Vec<I> = (0..batch).map(|_| setup()).collect();
            let start = Instant::now();
            for input in inputs {
                std::hint::black_box(op(input));
            }
            start.elapsed().as_secs_f64() / batch as f64
        })
        .collect();
    summarize(per_op)
}

fn children_of(report: &Report) -> Vec<Report> {
    match report.children() {
        Children::Reports(rs) => rs.clone(),
        Children::Services(_) => vec![report.clone()],
    }
}

/// Times parse, serialize and aggregate of generated reports of each size.
///
/// Runs on the calling thread. Calls are serialized process-wide so two
/// benchmarks never overlap, but other busy threads will still add noise.
pub fn measure_costs(sizes_kb: &[f64], repetitions: usize) -> Result<Vec<CostSample<f64>>, CalibrationError> {
    if sizes_kb.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(CalibrationError::InvalidSize);
    }
    let mut distinct = sizes_kb.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(CalibrationError::TooFewSizes(distinct.len()));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(CalibrationError::TooFewRepetitions(repetitions));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let generator = ReportGenerator::default();
    let mut samples = Vec::with_capacity(sizes_kb.len());
    let mut unstable = Vec::new();
    for &size_kb in sizes_kb {
        let report = generator.report_of_size_kb(size_kb, 1_700_000_000_000);
        let xml = serialize(&report);
        let children = children_of(&report);
        let parse_t = time_op(
            repetitions,
            || &xml[..],
            |bytes| parse(bytes).expect("generated XML parses"),
        );
        let serialize_t = time_op(repetitions, || &report, serialize);
        let aggregate_t = time_op(
            repetitions,
            || children.clone(),
            |cs| aggregate(cs, ReportKind::Intermediate, "calibration", 0).expect("valid children"),
        );
        for (name, t) in [
            ("parse", parse_t),
            ("serialize", serialize_t),
            ("aggregate", aggregate_t),
        ] {
            if t.spread > MAX_RELATIVE_SPREAD {
                unstable.push(format!(
                    "{name} at {size_kb} kB: spread {:.0}% of median",
                    t.spread * 100.0
                ));
            }
        }
        samples.push(CostSample {
            size_kb,
            parse_s: parse_t.median,
            serialize_s: serialize_t.median,
            aggregate_s: aggregate_t.median,
        });
    }
    if unstable.is_empty() {
        Ok(samples)
    } else {
        Err(CalibrationError::Unstable {
            detail: unstable.join("; "),
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("all samples have the same size; slope is undetermined")]
    DegenerateDesign,
    #[error("fitted parse cost does not grow with size (slope {0})")]
    NonPositiveParseSlope(f64),
}

/// Affine fit `cost = fixed + slope * size` for one operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit<F> {
    pub fixed: F,
    pub slope: F,
    /// Root-mean-square residual of the unclamped fit.
    pub rms_residual: F,
}

impl<F: fmt::Display> fmt::Display for AffineFit<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fixed={} slope={} rms={}", self.fixed, self.slope, self.rms_residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<F> {
    pub coefficients: LoadCoefficients<F>,
    pub parse: AffineFit<F>,
    pub serialize: AffineFit<F>,
    pub aggregate: AffineFit<F>,
    pub warnings: Vec<String>,
}

/// Ordinary least squares of `ys` on `xs`, centered for stability.
fn least_squares<F: Real>(xs: &[F], ys: &[F]) -> AffineFit<F> {
    let n = F::from_usize(xs.len()).unwrap();
    let mean_x = xs.iter().fold(F::zero(), |a, x| a + *x) / n;
    let mean_y = ys.iter().fold(F::zero(), |a, y| a + *y) / n;
    let (sxy, sxx) = xs.iter().zip(ys).fold((F::zero(), F::zero()), |(sxy, sxx), (x, y)| {
        let dx = *x - mean_x;
        (sxy + dx * (*y - mean_y), sxx + dx * dx)
    });
    let slope = sxy / sxx;
    let fixed = mean_y - slope * mean_x;
    let sse = xs.iter().zip(ys).fold(F::zero(), |a, (x, y)| {
        let r = *y - (fixed + slope * *x);
        a + r * r
    });
    AffineFit {
        fixed,
        slope,
        rms_residual: (sse / n).sqrt(),
    }
}

/// Fits load coefficients to measured costs. Negative slopes or intercepts
/// are clamped to zero with a warning; the network floor is not measurable
/// in-process and is taken from `net_latency_s`.
pub fn fit<F: Real>(samples: &[CostSample<F>], net_latency_s: F) -> Result<FitReport<F>, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples(samples.len()));
    }
    let xs: Vec<F> = samples.iter().map(|s| s.size_kb).collect();
    if xs.iter().all(|x| *x == xs[0]) {
        return Err(FitError::DegenerateDesign);
    }
    let column = |f: fn(&CostSample<F>) -> F| samples.iter().map(f).collect::<Vec<F>>();
    let parse = least_squares(&xs, &column(|s| s.parse_s));
    let serialize = least_squares(&xs, &column(|s| s.serialize_s));
    let aggregate = least_squares(&xs, &column(|s| s.aggregate_s));
    if !(parse.slope > F::zero()) {
        return Err(FitError::NonPositiveParseSlope(
            parse.slope.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let mut warnings = Vec::new();
    let mut clamp = |name: &str, v: F| {
        if v < F::zero() {
            warnings.push(format!("{name} fitted negative ({v:?}); clamped to 0"));
            F::zero()
        } else {
            v
        }
    };
    let coefficients = LoadCoefficients {
        parse_s_per_kb: parse.slope,
        parse_fixed_s: clamp("parse_fixed_s", parse.fixed),
        serialize_s_per_kb: clamp("serialize_s_per_kb", serialize.slope),
        serialize_fixed_s: clamp("serialize_fixed_s", serialize.fixed),
        aggregate_s_per_kb: clamp("aggregate_s_per_kb", aggregate.slope),
        net_latency_s,
        calibrated: true,
    };
    Ok(FitReport {
        coefficients,
        parse,
        serialize,
        aggregate,
        warnings,
    })
}
