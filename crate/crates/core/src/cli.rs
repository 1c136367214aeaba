//! Command-line front end: `analyze`, `calibrate`, `simulate` and `sweep`.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 when
//! calibration fails. All tables are CSV with a header row and LF endings.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::loadmodel::{
    fit, hierarchy_loads, measure_costs, reference_report_sizes, samples_to_csv, timings_from_loads, CalibrationError,
};
use crate::model::{prop_time_closed, staleness, ChannelTimings, HierarchyConfig, LatencyBound};
use crate::num::{format_micros_as_secs, parse_secs_to_micros, MICROS_PER_SEC};
use crate::sim::{self, SimConfig};
use crate::{Bound, Coefficients, Hierarchy, Micros, Timings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CALIBRATION: i32 = 3;

/// Environment variable that takes precedence over `--seed`.
pub const SEED_ENV: &str = "HIERMON_SEED";

/// Size of one node report in the analytic path, in kB.
pub const REFERENCE_NODE_KB: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Calibration(_) => EXIT_CALIBRATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Preset {
    /// Sensors publish straight to the root channel.
    #[value(name = "single-level")]
    SingleLevel,
    /// 50 Sensors per first-level channel.
    #[value(name = "two-level-50")]
    TwoLevel50,
    /// 100 Sensors per first-level channel.
    #[value(name = "two-level-100")]
    TwoLevel100,
    /// 10 services per machine, 10 machines per first-level channel, 10
    /// first-level channels per second-level channel.
    #[value(name = "three-level")]
    ThreeLevel,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SingleLevel,
        Preset::TwoLevel50,
        Preset::TwoLevel100,
        Preset::ThreeLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SingleLevel => "single-level",
            Preset::TwoLevel50 => "two-level-50",
            Preset::TwoLevel100 => "two-level-100",
            Preset::ThreeLevel => "three-level",
        }
    }

    /// Machines added by one step of the preset's free axis.
    pub fn granularity(self) -> u64 {
        match self {
            Preset::SingleLevel => 1,
            Preset::TwoLevel50 => 50,
            Preset::TwoLevel100 | Preset::ThreeLevel => 100,
        }
    }

    pub fn default_n_total(self) -> u64 {
        match self {
            Preset::SingleLevel => 100,
            Preset::TwoLevel50 => 500,
            Preset::TwoLevel100 => 1000,
            Preset::ThreeLevel => 400,
        }
    }

    /// Hierarchy with `n_total` machines, which must be a positive multiple
    /// of [`Preset::granularity`].
    pub fn hierarchy(self, n_total: u64) -> Result<Hierarchy, CliError> {
        let g = self.granularity();
        if n_total == 0 || !n_total.is_multiple_of(g) {
            return Err(CliError::Config(format!(
                "{}: n_total must be a positive multiple of {g}, got {n_total}",
                self.name()
            )));
        }
        let s = MICROS_PER_SEC;
        let (fanout, hold_s, period_s) = match self {
            Preset::SingleLevel => (vec![1, n_total], vec![60, 30], 60),
            Preset::TwoLevel50 => (vec![1, 50, n_total / 50], vec![30, 30, 30], 30),
            Preset::TwoLevel100 => (vec![1, 100, n_total / 100], vec![30, 30, 30], 30),
            Preset::ThreeLevel => (vec![10, 10, 10, n_total / 100], vec![10, 30, 30, 30], 10),
        };
        Ok(HierarchyConfig {
            depth: fanout.len() - 1,
            fanout,
            hold: hold_s.into_iter().map(|h| h * s).collect(),
            service_period: period_s * s,
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {s:?}")))
    }
}

/// Hierarchy read from a config file, with optional explicit timings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub hierarchy: Hierarchy,
    pub timings: Option<Timings>,
}

/// Parses the flat `key=value` config format: `h`, `fanout.0..h`,
/// `hold_s.0..h`, `service_period_s`, and optionally `t_in_s.1..h` with
/// `t_out_s.1..h` (a `t_in_s` value may be `saturated`). `#` starts a comment.
pub fn parse_config(text: &str) -> Result<ConfigFile, CliError> {
    let mut scalars: BTreeMap<String, String> = BTreeMap::new();
    let mut indexed: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| CliError::Config(format!("line {}: {m}", i + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim().to_owned());
        let duplicate = match key.split_once('.') {
            Some((base @ ("fanout" | "hold_s" | "t_in_s" | "t_out_s"), idx)) => {
                let idx: usize = idx.parse().map_err(|_| err(format!("bad index in {key:?}")))?;
                indexed.entry(base.to_owned()).or_default().insert(idx, value).is_some()
            }
            None if key == "h" || key == "service_period_s" => scalars.insert(key.to_owned(), value).is_some(),
            _ => return Err(err(format!("unknown key {key:?}"))),
        };
        if duplicate {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    let cfg_err = |m: String| CliError::Config(m);
    let depth: usize = scalars
        .get("h")
        .ok_or_else(|| cfg_err("missing key h".into()))?
        .parse()
        .map_err(|_| cfg_err("h must be a non-negative integer".into()))?;
    let seconds = |key: &str, text: &str| {
        parse_secs_to_micros(text).ok_or_else(|| cfg_err(format!("{key}: not a duration in seconds: {text:?}")))
    };
    let series = |base: &str, range: std::ops::RangeInclusive<usize>| -> Result<Vec<String>, CliError> {
        let empty = BTreeMap::new();
        let map = indexed.get(base).unwrap_or(&empty);
        if let Some(extra) = map.keys().find(|k| !range.contains(k)) {
            return Err(cfg_err(format!("{base}.{extra} out of range for h={depth}")));
        }
        range
            .map(|k| {
                map.get(&k)
                    .cloned()
                    .ok_or_else(|| cfg_err(format!("missing key {base}.{k}")))
            })
            .collect()
    };
    let fanout = series("fanout", 0..=depth)?
        .iter()
        .enumerate()
        .map(|(k, v)| {
            v.parse()
                .map_err(|_| cfg_err(format!("fanout.{k}: not an integer: {v:?}")))
        })
        .collect::<Result<Vec<u64>, _>>()?;
    let hold = series("hold_s", 0..=depth)?
        .iter()
        .enumerate()
        .map(|(k, v)| seconds(&format!("hold_s.{k}"), v))
        .collect::<Result<Vec<Micros>, _>>()?;
    let service_period = seconds(
        "service_period_s",
        scalars
            .get("service_period_s")
            .ok_or_else(|| cfg_err("missing key service_period_s".into()))?,
    )?;
    let hierarchy = HierarchyConfig {
        depth,
        fanout,
        hold,
        service_period,
    };
    hierarchy.validate().map_err(|violations| {
        CliError::Config(violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"))
    })?;

    let timings = if indexed.contains_key("t_in_s") || indexed.contains_key("t_out_s") {
        let t_in = series("t_in_s", 1..=depth)?
            .iter()
            .enumerate()
            .map(|(k, v)| match v.as_str() {
                "saturated" => Ok(LatencyBound::Saturated),
                v => seconds(&format!("t_in_s.{}", k + 1), v).map(LatencyBound::Finite),
            })
            .collect::<Result<Vec<Bound>, _>>()?;
        let t_out = series("t_out_s", 1..=depth)?
            .iter()
            .enumerate()
            .map(|(k, v)| seconds(&format!("t_out_s.{}", k + 1), v))
            .collect::<Result<Vec<Micros>, _>>()?;
        Some(ChannelTimings { t_in, t_out })
    } else {
        None
    };
    Ok(ConfigFile { hierarchy, timings })
}

/// Renders a hierarchy (and optional timings) in the config file format.
pub fn config_to_text(config: &ConfigFile) -> String {
    let h = &config.hierarchy;
    let mut out = format!("h={}\n", h.depth);
    for (k, f) in h.fanout.iter().enumerate() {
        out.push_str(&format!("fanout.{k}={f}\n"));
    }
    for (k, t) in h.hold.iter().enumerate() {
        out.push_str(&format!("hold_s.{k}={}\n", format_micros_as_secs(*t)));
    }
    out.push_str(&format!(
        "service_period_s={}\n",
        format_micros_as_secs(h.service_period)
    ));
    if let Some(t) = &config.timings {
        for (k, b) in t.t_in.iter().enumerate() {
            out.push_str(&format!("t_in_s.{}={}\n", k + 1, format_bound(*b)));
        }
        for (k, v) in t.t_out.iter().enumerate() {
            out.push_str(&format!("t_out_s.{}={}\n", k + 1, format_micros_as_secs(*v)));
        }
    }
    out
}

pub fn format_bound(b: Bound) -> String {
    match b {
        LatencyBound::Finite(us) => format_micros_as_secs(us),
        LatencyBound::Saturated => "saturated".into(),
    }
}

/// Per-level timings from the load model with reference-size node reports.
pub fn model_timings(hierarchy: &Hierarchy, coeffs: &Coefficients) -> Timings {
    let sizes = reference_report_sizes(hierarchy, REFERENCE_NODE_KB);
    timings_from_loads(&hierarchy_loads(hierarchy, coeffs, &sizes))
}

pub const ANALYZE_CSV_HEADER: &str = "level,t_prop_s,t_stale_s";

/// One row per level `0..=h` with propagation and staleness bounds.
pub fn analyze_csv(hierarchy: &Hierarchy, timings: &Timings) -> String {
    let mut out = format!("{ANALYZE_CSV_HEADER}\n");
    for level in 0..=hierarchy.depth {
        let prop = prop_time_closed(hierarchy, timings, level).expect("validated config");
        let stale = staleness(hierarchy, timings, level).expect("validated config");
        out.push_str(&format!("{level},{},{}\n", format_bound(prop), format_bound(stale)));
    }
    out
}

/// One point of a capacity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_total: u64,
    pub t_prop: Bound,
    pub root_utilization: f64,
    pub first_saturated_level: Option<usize>,
}

pub const SWEEP_CSV_HEADER: &str = "n_total,t_prop_s,root_utilization,first_saturated_level";

pub fn sweep_point(preset: Preset, n_total: u64, coeffs: &Coefficients) -> Result<SweepRow, CliError> {
    let hierarchy = preset.hierarchy(n_total)?;
    let sizes = reference_report_sizes(&hierarchy, REFERENCE_NODE_KB);
    let loads = hierarchy_loads(&hierarchy, coeffs, &sizes);
    let timings = timings_from_loads(&loads);
    Ok(SweepRow {
        n_total,
        t_prop: prop_time_closed(&hierarchy, &timings, hierarchy.depth).expect("preset is valid"),
        root_utilization: loads[hierarchy.depth - 1].utilization,
        first_saturated_level: loads.iter().position(|l| l.is_saturated()).map(|i| i + 1),
    })
}

/// Sweep points `step, 2*step, ...` up to `n_max`, each rounded up to the
/// preset's granularity. Rows are strictly increasing in `n_total`.
pub fn sweep(preset: Preset, n_max: u64, step: u64, coeffs: &Coefficients) -> Result<Vec<SweepRow>, CliError> {
    if step == 0 {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let g = preset.granularity();
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut n = step;
    while n <= n_max {
        let rounded = n.div_ceil(g) * g;
        if rounded <= n_max && rows.last().is_none_or(|r| r.n_total < rounded) {
            rows.push(sweep_point(preset, rounded, coeffs)?);
        }
        n += step;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let level = r
            .first_saturated_level
            .map_or_else(|| "none".to_owned(), |l| l.to_string());
        out.push_str(&format!(
            "{},{},{:.6},{level}\n",
            r.n_total,
            format_bound(r.t_prop),
            r.root_utilization
        ));
    }
    out
}

/// Largest machine count on the preset's grid whose root utilization stays
/// below 1, or 0 if even the smallest one saturates.
pub fn max_machines(preset: Preset, coeffs: &Coefficients) -> u64 {
    let g = preset.granularity();
    let fits = |k: u64| {
        sweep_point(preset, k * g, coeffs)
            .map(|r| r.root_utilization < 1.0)
            .unwrap_or(false)
    };
    if !fits(1) {
        return 0;
    }
    let mut hi = 2;
    while fits(hi) {
        hi *= 2;
        if hi > 1 << 40 {
            return u64::MAX;
        }
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo * g
}

#[derive(Debug, Parser)]
#[command(
    name = "hiermon",
    version,
    about = "Hierarchical monitoring latency and capacity analysis"
)]
struct Cli {
    /// Load-model coefficients file; synthetic defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    coeffs: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-level propagation and staleness bounds.
    Analyze(AnalyzeArgs),
    /// Time parse/serialize/aggregate on this host and fit coefficients.
    Calibrate(CalibrateArgs),
    /// Run one discrete-event simulation and check it against the bound.
    Simulate(SimulateArgs),
    /// Capacity sweeps over the hierarchy presets.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: Source,
    /// Machine count for a preset.
    #[arg(long)]
    n_total: Option<u64>,
    /// Treat every input and output time as zero.
    #[arg(long)]
    zero_network: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Report sizes in kB.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 5.0, 25.0, 50.0])]
    sizes: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Network floor written into the coefficients; not measurable in-process.
    #[arg(long, default_value_t = 0.005)]
    net_latency_s: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    n_total: Option<u64>,
    /// Simulated seconds; four times the sum of holds when omitted.
    #[arg(long)]
    duration: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Service tick phases are drawn from [0, jitter * period).
    #[arg(long, default_value_t = 0.5)]
    jitter: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = Preset::ALL)]
    presets: Vec<Preset>,
    #[arg(long, default_value_t = 6000)]
    n_max: u64,
    #[arg(long, default_value_t = 50)]
    step: u64,
}

/// Parses `args` (program name first) and runs the command. `seed_env` is
/// the value of [`SEED_ENV`], if set.
pub fn run<I, T>(args: I, seed_env: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli, seed_env, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for the binary: reads the process arguments and environment.
pub fn main_from_env() -> i32 {
    let seed = std::env::var(SEED_ENV).ok();
    run(
        std::env::args_os(),
        seed.as_deref(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

fn dispatch(cli: Cli, seed_env: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context {
        coeffs_path: cli.coeffs,
        out: cli.out,
    };
    match cli.command {
        Command::Analyze(a) => ctx.analyze(a, stdout, stderr),
        Command::Calibrate(a) => ctx.calibrate(a, stdout, stderr),
        Command::Simulate(a) => ctx.simulate(a, seed_env, stdout, stderr),
        Command::Sweep(a) => ctx.sweep(a, stdout, stderr),
    }
}

struct Context {
    coeffs_path: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Usage(format!("write failed: {e}")))
}

impl Context {
    fn coeffs(&self, stderr: &mut dyn Write) -> Result<Coefficients, CliError> {
        match &self.coeffs_path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                Coefficients::from_file_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            None => {
                emit(
                    stderr,
                    "warning: no --coeffs given; using synthetic default coefficients (calibrated=false)\n",
                )?;
                Ok(Coefficients::synthetic_defaults())
            }
        }
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn write_file(&self, dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn load_source(&self, source: &Source, n_total: Option<u64>) -> Result<ConfigFile, CliError> {
        match (source.preset, &source.config) {
            (Some(preset), _) => Ok(ConfigFile {
                hierarchy: preset.hierarchy(n_total.unwrap_or(preset.default_n_total()))?,
                timings: None,
            }),
            (None, Some(path)) => {
                if n_total.is_some() {
                    return Err(CliError::Usage("--n-total only applies to --preset".into()));
                }
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            (None, None) => Err(CliError::Usage("one of --preset or --config is required".into())),
        }
    }

    fn analyze(&self, args: AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
        let config = self.load_source(&args.source, args.n_total)?;
        let h = &config.hierarchy;
        let timings = if args.zero_network {
            ChannelTimings::zero(h.depth)
        } else if let Some(t) = config.timings {
            t
        } else {
            model_timings(h, &self.coeffs(stderr)?)
        };
        let csv = analyze_csv(h, &timings);
        if self.out.is_some() {
            let dir = self.out_dir()?;
            self.write_file(&dir, "analyze.csv", &csv)?;
        }
        emit(stdout, &csv)
    }

    fn calibrate(&self, args: CalibrateArgs, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<(), CliError> {
        if !(args.net_latency_s >= 0.0 && args.net_latency_s.is_finite()) {
            return Err(CliError::Usage("--net-latency-s must be >= 0".into()));
        }
        let samples = match measure_costs(&args.sizes, args.reps) {
            Ok(s) => s,
            Err(CalibrationError::Unstable { detail, samples }) => {
                let dir = self.out_dir()?;
                let path = self.write_file(&dir, "samples.csv", &samples_to_csv(&samples))?;
                return Err(CliError::Calibration(format!(
                    "{detail}; samples kept in {}",
                    path.display()
                )));
            }
            Err(e) => return Err(CliError::Usage(e.to_string())),
        };
        let dir = self.out_dir()?;
        let samples_path = self.write_file(&dir, "samples.csv", &samples_to_csv(&samples))?;
        let report = fit(&samples, args.net_latency_s).map_err(|e| CliError::Calibration(e.to_string()))?;
        let coeffs_path = self.write_file(&dir, "coefficients.txt", &report.coefficients.to_file_text())?;
        let mut text = String::new();
        text.push_str(&format!("parse: {}\n", report.parse));
        text.push_str(&format!("serialize: {}\n", report.serialize));
        text.push_str(&format!("aggregate: {}\n", report.aggregate));
        for w in &report.warnings {
            text.push_str(&format!("warning: {w}\n"));
        }
        text.push_str(&format!("samples: {}\n", samples_path.display()));
        text.push_str(&format!("coefficients: {}\n", coeffs_path.display()));
        emit(stdout, &text)
    }

    fn simulate(
        &self,
        args: SimulateArgs,
        seed_env: Option<&str>,
        stdout: &mut dyn Write,
        stderr: &mut dyn Write,
    ) -> Result<(), CliError> {
        let config = self.load_source(&args.source, args.n_total)?;
        if config.timings.is_some() {
            emit(
                stderr,
                "warning: config timings are ignored; simulate derives delays from the load model\n",
            )?;
        }
        let seed = match seed_env {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?,
            None => args.seed,
        };
        let coeffs = self.coeffs(stderr)?;
        let mut sim_config = SimConfig::new(config.hierarchy, coeffs);
        if let Some(d) = &args.duration {
            sim_config.duration =
                parse_secs_to_micros(d).ok_or_else(|| CliError::Usage(format!("--duration: not seconds: {d:?}")))?;
        }
        sim_config.seed = seed;
        sim_config.jitter_fraction = args.jitter;
        let trace = sim::run(&sim_config).map_err(|e| CliError::Config(e.to_string()))?;
        let dir = self.out_dir()?;
        self.write_file(&dir, "deliveries.csv", &trace.deliveries_csv())?;
        self.write_file(&dir, "machines.csv", &trace.machines_csv())?;
        let mut text = sim::summary(&trace);
        text.push_str(&format!(" seed={seed}"));
        if let Err(e) = trace.saturation() {
            text.push_str(&format!(
                " note=\"{e}; {} messages given the substitute delay\"",
                trace.saturated_messages
            ));
        }
        text.push('\n');
        emit(stdout, &text)
    }

    fn sweep(&self, args: SweepArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
        let coeffs = self.coeffs(stderr)?;
        let label = if coeffs.calibrated { "calibrated" } else { "synthetic" };
        let dir = self.out_dir()?;
        let mut summary = String::from("preset,max_machines,coefficients\n");
        let mut presets = args.presets.clone();
        presets.dedup();
        for preset in presets {
            let rows = sweep(preset, args.n_max, args.step, &coeffs)?;
            self.write_file(&dir, &format!("sweep-{}.csv", preset.name()), &sweep_csv(&rows))?;
            summary.push_str(&format!(
                "{},{},{label}\n",
                preset.name(),
                max_machines(preset, &coeffs)
            ));
        }
        self.write_file(&dir, "max_machines.csv", &summary)?;
        emit(stdout, &summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Micros = MICROS_PER_SEC;

    #[test]
    fn preset_shapes() {
        let h = Preset::ThreeLevel.hierarchy(400).unwrap();
        assert_eq!(h.fanout, vec![10, 10, 10, 4]);
        assert_eq!(h.machines_total(), 400);
        assert_eq!(Preset::SingleLevel.hierarchy(7).unwrap().machines_total(), 7);
        assert_eq!(Preset::TwoLevel100.hierarchy(300).unwrap().fanout, vec![1, 100, 3]);
        assert!(Preset::TwoLevel50.hierarchy(75).is_err());
        assert!(Preset::ThreeLevel.hierarchy(0).is_err());
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let h = p.hierarchy(p.default_n_total()).unwrap();
            assert!(h.validate().is_ok());
            assert_eq!(h.machines_total(), p.default_n_total());
        }
    }

    #[test]
    fn config_roundtrip() {
        let text = "# comment\nh=2 # depth\nfanout.0=1\nfanout.1=50\nfanout.2=3\nhold_s.0=30\nhold_s.1=30\nhold_s.2=0.5\nservice_period_s=30\nt_in_s.1=0.06\nt_in_s.2=saturated\nt_out_s.1=0.01\nt_out_s.2=0\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.hierarchy.hold, vec![30 * S, 30 * S, S / 2]);
        let t = cfg.timings.as_ref().unwrap();
        assert_eq!(t.t_in, vec![LatencyBound::Finite(60_000), LatencyBound::Saturated]);
        assert_eq!(parse_config(&config_to_text(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        for bad in [
            "",
            "h=1\nfanout.0=1\nhold_s.0=1\nhold_s.1=1\nservice_period_s=1\n",
            "h=1\nfanout.0=1\nfanout.1=2\nhold_s.0=1\nhold_s.1=1\nservice_period_s=1\nbogus=3\n",
            "h=1\nfanout.0=1\nfanout.1=2\nfanout.2=2\nhold_s.0=1\nhold_s.1=1\nservice_period_s=1\n",
            "h=1\nfanout.0=1\nfanout.1=2\nhold_s.0=0\nhold_s.1=1\nservice_period_s=1\n",
            "h=1\nh=1\n",
            "h=1\nfanout.0=1\nfanout.1=2\nhold_s.0=1\nhold_s.1=1\nservice_period_s=1\nt_in_s.1=1\n",
            "just words\n",
        ] {
            assert!(parse_config(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sweep_rows_increase_and_respect_granularity() {
        let c = Coefficients::synthetic_defaults();
        let rows = sweep(Preset::ThreeLevel, 1000, 50, &c).unwrap();
        let ns: Vec<u64> = rows.iter().map(|r| r.n_total).collect();
        assert_eq!(ns, vec![100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]);
        assert!(sweep(Preset::SingleLevel, 10, 0, &c).is_err());
    }

    #[test]
    fn max_machines_is_last_unsaturated_point() {
        let c = Coefficients::synthetic_defaults();
        for p in Preset::ALL {
            let m = max_machines(p, &c);
            assert!(sweep_point(p, m, &c).unwrap().root_utilization < 1.0);
            assert!(sweep_point(p, m + p.granularity(), &c).unwrap().root_utilization >= 1.0);
        }
    }

    #[test]
    fn two_level_is_slower_until_the_single_level_knee() {
        let c = Coefficients::synthetic_defaults();
        let mut crossed = None;
        for n in (50..=1050).step_by(50) {
            let single = sweep_point(Preset::SingleLevel, n, &c).unwrap();
            let two = sweep_point(Preset::TwoLevel50, n, &c).unwrap();
            let (s, t) = (single.t_prop.finite().unwrap(), two.t_prop.finite().unwrap());
            if single.root_utilization < 0.9 {
                assert!(t >= s, "n={n}: {t} < {s}");
            } else if t < s && crossed.is_none() {
                crossed = Some(n);
            }
        }
        // Past U = 0.9 the single-level input delay outgrows the extra hops.
        assert_eq!(crossed, Some(950));
        assert!(max_machines(Preset::TwoLevel50, &c) > max_machines(Preset::SingleLevel, &c));
    }

    #[test]
    fn analyze_three_level_zero_network() {
        let h = Preset::ThreeLevel.hierarchy(400).unwrap();
        let csv = analyze_csv(&h, &ChannelTimings::zero(3));
        assert_eq!(csv, "level,t_prop_s,t_stale_s\n0,10,20\n1,10,20\n2,40,50\n3,70,80\n");
    }

    #[test]
    fn exit_codes() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["hiermon"], None, &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["hiermon", "frobnicate"], None, &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["hiermon", "--help"], None, &mut out, &mut err), EXIT_OK);
        assert_eq!(
            run(
                ["hiermon", "analyze", "--preset", "four-level"],
                None,
                &mut out,
                &mut err
            ),
            EXIT_USAGE
        );
        assert_eq!(
            run(["hiermon", "calibrate", "--reps", "1"], None, &mut out, &mut err),
            EXIT_USAGE
        );
        assert_eq!(
            run(["hiermon", "calibrate", "--sizes", "5"], None, &mut out, &mut err),
            EXIT_USAGE
        );
    }
}
