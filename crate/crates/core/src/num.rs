//! Scalar trait bounds shared by the analytic and load models.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

/// Duration-like scalar used by the analytic latency model.
///
/// Anything closed under `+` with a total-enough order qualifies: integer
/// microseconds (the exact default), `f64` seconds, or a rational type.
pub trait TimeScalar: Num + Copy + PartialOrd + Debug {}

impl<T: Num + Copy + PartialOrd + Debug> TimeScalar for T {}

/// Floating-point scalar for the load model and least-squares fitting: f32 or f64.
pub trait Real: Float + FromPrimitive + Debug {}

impl Real for f32 {}
impl Real for f64 {}

/// Microseconds per second, the resolution of [`crate::Micros`].
pub const MICROS_PER_SEC: i64 = 1_000_000;

/// Converts seconds to whole microseconds, rounding up so a converted delay
/// never understates the real one.
pub fn secs_to_micros_ceil<F: Real>(secs: F) -> i64 {
    // Snap to whole nanoseconds first so representation error (0.054 * 1e6 =
    // 54000.000000000007) does not bump the result up a microsecond.
    let ns = (secs * F::from_f64(1e9).unwrap()).round();
    let us = ns / F::from_f64(1e3).unwrap();
    us.ceil().to_i64().unwrap_or(i64::MAX)
}

pub fn micros_to_secs(us: i64) -> f64 {
    us as f64 / MICROS_PER_SEC as f64
}

/// Formats microseconds as a decimal number of seconds without loss
/// (`70`, `0.5`, `0.000001`).
pub fn format_micros_as_secs(us: i64) -> String {
    let sign = if us < 0 { "-" } else { "" };
    let abs = us.unsigned_abs();
    let whole = abs / MICROS_PER_SEC as u64;
    let frac = abs % MICROS_PER_SEC as u64;
    if frac == 0 {
        format!("{sign}{whole}")
    } else {
        let digits = format!("{frac:06}");
        format!("{sign}{whole}.{}", digits.trim_end_matches('0'))
    }
}

/// Parses a decimal seconds string into exact microseconds. Rejects more than
/// six fractional digits rather than rounding.
pub fn parse_secs_to_micros(text: &str) -> Option<i64> {
    let text = text.trim();
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (whole, frac) = match body.split_once('.') {
        Some((w, f)) => (w, f),
        None => (body, ""),
    };
    if whole.is_empty() && frac.is_empty() {
        return None;
    }
    if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if frac.len() > 6 {
        return None;
    }
    let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
    let frac_us: i64 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<6}").parse().ok()?
    };
    let us = whole.checked_mul(MICROS_PER_SEC)?.checked_add(frac_us)?;
    Some(if negative { -us } else { us })
}
