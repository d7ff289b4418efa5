//! Signed fixed-point arithmetic for dataplane registers.
//!
//! A [`FixedPointFormat`] is a two's-complement width `b` with `F` fraction
//! bits; raw integers live in `[-2^(b-1), 2^(b-1) - 1]` and encode the real
//! value `raw * 2^-F`. All raw arithmetic happens in `i128` so that no
//! intermediate wraps before the range check.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RegisterCoord, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FixedPointFormat {
    total_bits: u8,
    fraction_bits: u8,
}

impl FixedPointFormat {
    pub fn new(total_bits: u8, fraction_bits: u8) -> Result<Self> {
        if !(2..=64).contains(&total_bits) {
            return Err(Error::InvalidFormat(format!("total_bits {total_bits} not in 2..=64")));
        }
        if fraction_bits >= total_bits {
            return Err(Error::InvalidFormat(format!(
                "fraction_bits {fraction_bits} must be < total_bits {total_bits}"
            )));
        }
        Ok(Self {
            total_bits,
            fraction_bits,
        })
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn fraction_bits(&self) -> u8 {
        self.fraction_bits
    }

    pub fn max_raw(&self) -> i64 {
        ((1i128 << (self.total_bits - 1)) - 1) as i64
    }

    pub fn min_raw(&self) -> i64 {
        (-(1i128 << (self.total_bits - 1))) as i64
    }

    /// One least-significant bit, in real units.
    pub fn lsb(&self) -> f64 {
        (-(self.fraction_bits as f64)).exp2()
    }

    /// Maximum rounding error of a single quantization: half an LSB.
    pub fn eta_q(&self) -> f64 {
        (-(self.fraction_bits as f64) - 1.0).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.lsb()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.lsb()
    }

    pub fn contains_raw(&self, raw: i128) -> bool {
        raw >= self.min_raw() as i128 && raw <= self.max_raw() as i128
    }

    fn scale(&self) -> f64 {
        (self.fraction_bits as f64).exp2()
    }

    /// Round `x` onto the raw grid (half-to-even) without a range check.
    fn round_raw(&self, x: f64) -> f64 {
        (x * self.scale()).round_ties_even()
    }

    fn saturate(&self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}.{}", self.total_bits, self.fraction_bits)
    }
}

impl FromStr for FixedPointFormat {
    type Err = Error;

    /// Parses the `qB.F` notation, e.g. `q16.8`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("expected qB.F, got {s:?}"));
        let body = s.trim().strip_prefix('q').ok_or_else(bad)?;
        let (b, f) = body.split_once('.').ok_or_else(bad)?;
        let b: u8 = b.parse().map_err(|_| bad())?;
        let f: u8 = f.parse().map_err(|_| bad())?;
        Self::new(b, f)
    }
}

impl Serialize for FixedPointFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FixedPointFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What an accumulator does when an add leaves the register range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    /// Return [`Error::Overflow`].
    #[default]
    Checked,
    /// Clamp to the range, as a saturating ALU would.
    Saturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointValue {
    raw: i64,
    format: FixedPointFormat,
}

impl FixedPointValue {
    pub fn from_raw(raw: i64, format: FixedPointFormat) -> Result<Self> {
        if !format.contains_raw(raw as i128) {
            return Err(overflow(raw as i128, format, None));
        }
        Ok(Self { raw, format })
    }

    pub fn zero(format: FixedPointFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn value(&self) -> f64 {
        self.raw as f64 * self.format.lsb()
    }

    pub fn checked_add(self, other: Self) -> Result<Self> {
        same_format(self.format, other.format)?;
        let sum = self.raw as i128 + other.raw as i128;
        if !self.format.contains_raw(sum) {
            return Err(overflow(sum, self.format, None));
        }
        Ok(Self {
            raw: sum as i64,
            format: self.format,
        })
    }

    pub fn saturating_add(self, other: Self) -> Result<Self> {
        same_format(self.format, other.format)?;
        let sum = self.raw as i128 + other.raw as i128;
        Ok(Self {
            raw: self.format.saturate(sum),
            format: self.format,
        })
    }

    pub fn add_with(self, other: Self, policy: OverflowPolicy) -> Result<Self> {
        match policy {
            OverflowPolicy::Checked => self.checked_add(other),
            OverflowPolicy::Saturating => self.saturating_add(other),
        }
    }
}

impl fmt::Display for FixedPointValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}:{})", self.value(), self.format, self.raw)
    }
}

fn same_format(a: FixedPointFormat, b: FixedPointFormat) -> Result<()> {
    if a != b {
        return Err(Error::FormatMismatch {
            left: a.to_string(),
            right: b.to_string(),
        });
    }
    Ok(())
}

pub(crate) fn overflow(raw: i128, format: FixedPointFormat, coord: Option<RegisterCoord>) -> Error {
    Error::Overflow {
        raw,
        format: format.to_string(),
        coord,
    }
}

/// Round-half-to-even quantization. Fails with [`Error::OutOfRange`] when the
/// rounded value does not fit the format.
pub fn quantize(x: f64, format: FixedPointFormat) -> Result<FixedPointValue> {
    let raw = quantize_raw(x, format)?;
    Ok(FixedPointValue { raw, format })
}

pub(crate) fn quantize_raw(x: f64, format: FixedPointFormat) -> Result<i64> {
    let out = || Error::OutOfRange {
        value: x,
        format: format.to_string(),
    };
    if !x.is_finite() {
        return Err(out());
    }
    let r = format.round_raw(x);
    // 2^(b-1) is exact in f64 for every legal width.
    let limit = ((format.total_bits - 1) as f64).exp2();
    if r >= limit || r < -limit {
        return Err(out());
    }
    Ok(r as i64)
}

/// Raw accumulator add under a policy, reporting the register coordinate on
/// overflow.
pub(crate) fn accumulate_raw(
    acc: i64,
    inc: i64,
    format: FixedPointFormat,
    policy: OverflowPolicy,
    coord: RegisterCoord,
) -> Result<i64> {
    let sum = acc as i128 + inc as i128;
    if format.contains_raw(sum) {
        return Ok(sum as i64);
    }
    match policy {
        OverflowPolicy::Checked => Err(overflow(sum, format, Some(coord))),
        OverflowPolicy::Saturating => Ok(format.saturate(sum)),
    }
}

/// Largest `T` with `T*B_phi*R_v + T*eta_q*m*d_v <= 2^(b-1) - 1`.
///
/// The right-hand side is the raw register maximum, so callers passing
/// real-valued norms get the literal inequality. Use
/// [`register_overflow_horizon`] for the horizon of an actual register.
pub fn overflow_horizon(format: FixedPointFormat, b_phi: f64, r_v: f64, eta_q: f64, m: usize, d_v: usize) -> u64 {
    let limit = format.max_raw() as f64;
    let per_step = b_phi * r_v + eta_q * (m as f64) * (d_v as f64);
    if !(per_step > 0.0) {
        return u64::MAX;
    }
    let fits = |t: u64| (t as f64) * b_phi * r_v + (t as f64) * eta_q * (m * d_v) as f64 <= limit;
    let mut t = (limit / per_step).floor().max(0.0) as u64;
    while t > 0 && !fits(t) {
        t -= 1;
    }
    while fits(t + 1) {
        t += 1;
    }
    t
}

/// Overflow horizon of an `m x d_v` accumulator stored in `format`.
///
/// Expresses the per-step increment bound and the rounding error in LSB
/// units, so the inequality compares like with like. `R_v` is floored at 1 so
/// the same horizon also covers the `Z` accumulator.
pub fn register_overflow_horizon(format: FixedPointFormat, b_phi: f64, r_v: f64, m: usize, d_v: usize) -> u64 {
    let scale = (format.fraction_bits() as f64).exp2();
    overflow_horizon(format, b_phi * scale, r_v.max(1.0), 0.5, m, d_v)
}

/// Per-update rounding accounting for an accumulator.
///
/// Records the measured absolute rounding error alongside two bound
/// accountings: one rounding event per stored scalar, and one per row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTracker {
    /// Sum of |quantized - exact| over every rounding performed.
    pub measured: f64,
    /// Largest single rounding error seen.
    pub max_single: f64,
    pub rounding_events: u64,
    /// eta_q * (m*d_v + m) per update.
    pub bound_per_scalar: f64,
    /// eta_q * (m + m) per update.
    pub bound_per_row: f64,
}

impl ErrorTracker {
    pub(crate) fn record(&mut self, err: f64) {
        let err = err.abs();
        self.measured += err;
        self.max_single = self.max_single.max(err);
        self.rounding_events += 1;
    }

    pub(crate) fn close_update(&mut self, eta_q_s: f64, eta_q_z: f64, m: usize, d_v: usize) {
        self.bound_per_scalar += eta_q_s * (m * d_v) as f64 + eta_q_z * m as f64;
        self.bound_per_row += eta_q_s * m as f64 + eta_q_z * m as f64;
    }

    pub(crate) fn merge(&mut self, other: &ErrorTracker) {
        self.measured += other.measured;
        self.max_single = self.max_single.max(other.max_single);
        self.rounding_events += other.rounding_events;
        self.bound_per_scalar += other.bound_per_scalar;
        self.bound_per_row += other.bound_per_row;
    }
}
