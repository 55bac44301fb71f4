//! Signed two's-complement fixed-point numbers in a configurable Q-format.
//!
//! Every arithmetic operation saturates on overflow and reports it through a
//! flag; nothing wraps. Raw values are stored in an `i64`, so word widths up to
//! 64 bits are supported.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FxpError {
    #[error("invalid format Q{word}.{frac}: need 4 <= word <= 64 and frac < word")]
    InvalidFormat { word: u32, frac: u32 },
    #[error("cannot parse format {0:?} (expected e.g. \"Q8.4\")")]
    BadFormatString(String),
    #[error("cannot parse rounding mode {0:?} (expected \"truncate\" or \"nearest-even\")")]
    BadRounding(String),
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(FxpFormat, FxpFormat),
    #[error("raw value {raw} does not fit in {fmt}")]
    RawOutOfRange { raw: i64, fmt: FxpFormat },
    #[error("shift count {shift} out of range for {fmt}")]
    ShiftOutOfRange { shift: u32, fmt: FxpFormat },
}

/// A signed Q-format: `word_bits` total bits of which `frac_bits` are fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FxpFormat {
    word_bits: u32,
    frac_bits: u32,
}

impl FxpFormat {
    pub const Q8_4: FxpFormat = FxpFormat { word_bits: 8, frac_bits: 4 };
    pub const Q16_8: FxpFormat = FxpFormat { word_bits: 16, frac_bits: 8 };
    pub const Q32_16: FxpFormat = FxpFormat { word_bits: 32, frac_bits: 16 };

    pub fn new(word_bits: u32, frac_bits: u32) -> Result<Self, FxpError> {
        if !(4..=64).contains(&word_bits) || frac_bits >= word_bits {
            return Err(FxpError::InvalidFormat { word: word_bits, frac: frac_bits });
        }
        Ok(Self { word_bits, frac_bits })
    }

    /// Default format for a given word width (half the bits fractional).
    pub fn default_for_width(word_bits: u32) -> Result<Self, FxpError> {
        Self::new(word_bits, word_bits / 2)
    }

    pub fn word_bits(self) -> u32 {
        self.word_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    /// Integer bits excluding the sign bit.
    pub fn int_bits(self) -> u32 {
        self.word_bits - 1 - self.frac_bits
    }

    pub fn max_raw(self) -> i64 {
        if self.word_bits == 64 {
            i64::MAX
        } else {
            (1i64 << (self.word_bits - 1)) - 1
        }
    }

    pub fn min_raw(self) -> i64 {
        if self.word_bits == 64 {
            i64::MIN
        } else {
            -(1i64 << (self.word_bits - 1))
        }
    }

    /// Unit in the last place, `2^-frac_bits`.
    pub fn ulp(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn one_raw(self) -> i64 {
        1i64 << self.frac_bits
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.ulp()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.ulp()
    }

    /// Same fraction bits with `guard` extra integer bits, capped at 64 bits.
    pub fn widened(self, guard: u32) -> FxpFormat {
        FxpFormat { word_bits: (self.word_bits + guard).min(64), frac_bits: self.frac_bits }
    }

    /// Clamp a wide intermediate into range; the flag is set when clamping happened.
    #[inline]
    pub fn saturate(self, v: i128) -> (i64, bool) {
        let (lo, hi) = (self.min_raw() as i128, self.max_raw() as i128);
        if v > hi {
            (hi as i64, true)
        } else if v < lo {
            (lo as i64, true)
        } else {
            (v as i64, false)
        }
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        raw >= self.min_raw() && raw <= self.max_raw()
    }

    /// Every representable raw value, in increasing order. Intended for exhaustive sweeps.
    pub fn all_raw(self) -> impl Iterator<Item = i64> {
        self.min_raw()..=self.max_raw()
    }
}

impl fmt::Display for FxpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.word_bits, self.frac_bits)
    }
}

impl FromStr for FxpFormat {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FxpError::BadFormatString(s.to_string());
        let body = s.trim().strip_prefix(['Q', 'q']).ok_or_else(bad)?;
        let (w, f) = body.split_once('.').ok_or_else(bad)?;
        let w = w.parse().map_err(|_| bad())?;
        let f = f.parse().map_err(|_| bad())?;
        FxpFormat::new(w, f)
    }
}

impl TryFrom<String> for FxpFormat {
    type Error = FxpError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FxpFormat> for String {
    fn from(f: FxpFormat) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Round toward negative infinity.
    #[default]
    Truncate,
    /// Round to nearest, ties to even.
    NearestEven,
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundingMode::Truncate => "truncate",
            RoundingMode::NearestEven => "nearest-even",
        })
    }
}

impl FromStr for RoundingMode {
    type Err = FxpError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "truncate" | "trunc" | "floor" => Ok(RoundingMode::Truncate),
            "nearest-even" | "rne" | "nearest" => Ok(RoundingMode::NearestEven),
            _ => Err(FxpError::BadRounding(s.to_string())),
        }
    }
}

/// A fixed-point value: `raw * 2^-frac_bits` in format `fmt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxpValue {
    raw: i64,
    fmt: FxpFormat,
}

/// Round `scaled` (already multiplied by `2^frac`) to an integer.
fn round_scaled(scaled: f64, mode: RoundingMode) -> f64 {
    match mode {
        RoundingMode::Truncate => scaled.floor(),
        RoundingMode::NearestEven => {
            let fl = scaled.floor();
            let diff = scaled - fl;
            if diff > 0.5 || (diff == 0.5 && fl % 2.0 != 0.0) {
                fl + 1.0
            } else {
                fl
            }
        }
    }
}

/// Integer division of `num` by `2^shift` under `mode`.
fn round_shift_right(num: i128, shift: u32, mode: RoundingMode) -> i128 {
    if shift == 0 {
        return num;
    }
    if shift >= 127 {
        return if num < 0 && mode == RoundingMode::Truncate { -1 } else { 0 };
    }
    let floor = num >> shift;
    match mode {
        RoundingMode::Truncate => floor,
        RoundingMode::NearestEven => {
            let rem = num - (floor << shift);
            let half = 1i128 << (shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

impl FxpValue {
    pub fn from_raw(raw: i64, fmt: FxpFormat) -> Result<Self, FxpError> {
        if !fmt.contains_raw(raw) {
            return Err(FxpError::RawOutOfRange { raw, fmt });
        }
        Ok(Self { raw, fmt })
    }

    /// Build from a raw value, saturating into range.
    pub fn from_raw_saturating(raw: i128, fmt: FxpFormat) -> (Self, bool) {
        let (raw, sat) = fmt.saturate(raw);
        (Self { raw, fmt }, sat)
    }

    pub fn zero(fmt: FxpFormat) -> Self {
        Self { raw: 0, fmt }
    }

    /// `1.0`, saturated when the format has no integer bits.
    pub fn one(fmt: FxpFormat) -> Self {
        Self::from_raw_saturating(1i128 << fmt.frac_bits, fmt).0
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> FxpFormat {
        self.fmt
    }

    /// Quantize a real value; the flag reports saturation (NaN maps to zero and sets it).
    pub fn quantize_flagged(value: f64, fmt: FxpFormat, mode: RoundingMode) -> (Self, bool) {
        if value.is_nan() {
            return (Self::zero(fmt), true);
        }
        let scaled = round_scaled(value * (fmt.frac_bits as f64).exp2(), mode);
        if scaled >= fmt.max_raw() as f64 {
            let sat = scaled > fmt.max_raw() as f64;
            return (Self { raw: fmt.max_raw(), fmt }, sat);
        }
        if scaled <= fmt.min_raw() as f64 {
            let sat = scaled < fmt.min_raw() as f64;
            return (Self { raw: fmt.min_raw(), fmt }, sat);
        }
        (Self { raw: scaled as i64, fmt }, false)
    }

    pub fn quantize(value: f64, fmt: FxpFormat, mode: RoundingMode) -> Self {
        Self::quantize_flagged(value, fmt, mode).0
    }

    /// Exact real value (exact whenever the raw value fits in 53 bits).
    pub fn to_real(self) -> f64 {
        self.raw as f64 * self.fmt.ulp()
    }

    fn check(self, rhs: Self) -> Result<(), FxpError> {
        if self.fmt != rhs.fmt {
            return Err(FxpError::FormatMismatch(self.fmt, rhs.fmt));
        }
        Ok(())
    }

    pub fn add_flagged(self, rhs: Self) -> Result<(Self, bool), FxpError> {
        self.check(rhs)?;
        Ok(Self::from_raw_saturating(self.raw as i128 + rhs.raw as i128, self.fmt))
    }

    pub fn sub_flagged(self, rhs: Self) -> Result<(Self, bool), FxpError> {
        self.check(rhs)?;
        Ok(Self::from_raw_saturating(self.raw as i128 - rhs.raw as i128, self.fmt))
    }

    pub fn add(self, rhs: Self) -> Result<Self, FxpError> {
        self.add_flagged(rhs).map(|(v, _)| v)
    }

    pub fn sub(self, rhs: Self) -> Result<Self, FxpError> {
        self.sub_flagged(rhs).map(|(v, _)| v)
    }

    /// Negation; `-min` saturates to `max`.
    pub fn negate_flagged(self) -> (Self, bool) {
        Self::from_raw_saturating(-(self.raw as i128), self.fmt)
    }

    pub fn negate(self) -> Self {
        self.negate_flagged().0
    }

    /// Arithmetic right shift (rounds toward negative infinity).
    pub fn shr(self, shift: u32) -> Result<Self, FxpError> {
        if shift >= self.fmt.word_bits {
            return Err(FxpError::ShiftOutOfRange { shift, fmt: self.fmt });
        }
        Ok(Self { raw: self.raw >> shift, fmt: self.fmt })
    }

    /// Saturating left shift by any amount.
    pub fn shl_saturating(self, shift: u32) -> (Self, bool) {
        if self.raw == 0 {
            return (self, false);
        }
        if shift >= 64 {
            let v = if self.raw > 0 { i128::MAX } else { i128::MIN };
            return Self::from_raw_saturating(v, self.fmt);
        }
        Self::from_raw_saturating((self.raw as i128) << shift, self.fmt)
    }

    /// Multiply by `2^k`: saturating for `k > 0`, truncating toward negative infinity for `k < 0`.
    pub fn scale_pow2(self, k: i32) -> (Self, bool) {
        if k >= 0 {
            self.shl_saturating(k as u32)
        } else {
            let s = k.unsigned_abs().min(63);
            (Self { raw: self.raw >> s, fmt: self.fmt }, false)
        }
    }

    /// Convert to another format; fraction bits are dropped under `mode`, range saturates.
    pub fn requantize(self, fmt: FxpFormat, mode: RoundingMode) -> (Self, bool) {
        let raw = self.raw as i128;
        let v = if fmt.frac_bits >= self.fmt.frac_bits {
            raw << (fmt.frac_bits - self.fmt.frac_bits)
        } else {
            round_shift_right(raw, self.fmt.frac_bits - fmt.frac_bits, mode)
        };
        Self::from_raw_saturating(v, fmt)
    }

    pub fn max(self, rhs: Self) -> Result<Self, FxpError> {
        self.check(rhs)?;
        Ok(if rhs.raw > self.raw { rhs } else { self })
    }

    pub fn is_negative(self) -> bool {
        self.raw < 0
    }
}

impl fmt::Display for FxpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_real())
    }
}

/// Sticky saturation flag shared across a chain of operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Saturation(bool);

impl Saturation {
    pub fn note<T>(&mut self, (value, flag): (T, bool)) -> T {
        self.0 |= flag;
        value
    }

    pub fn set(&mut self) {
        self.0 = true;
    }

    pub fn merge(&mut self, other: Saturation) {
        self.0 |= other.0;
    }

    pub fn is_set(self) -> bool {
        self.0
    }
}
