//! Generalized CORDIC in circular, linear and hyperbolic coordinates.
//!
//! One iteration with shift `i` and direction `d` (±1) computes
//!
//! ```text
//! x' = x - m * d * (y >> i)
//! y' = y + d * (x >> i)
//! z' = z - d * E_i
//! ```
//!
//! with `m = +1` (circular), `0` (linear) or `-1` (hyperbolic). In linear mode `x`
//! never changes, so rotating from `(x, b, w)` leaves `y ≈ b + x*w`: that is the
//! multiply-accumulate of the processing element. Rotation drives `z` to zero,
//! vectoring drives `y` to zero. A zero residual counts as positive when picking
//! the direction.
//!
//! All arithmetic is done on raw two's-complement values in the working format.
//! Shifts truncate toward negative infinity; sums saturate and set a sticky flag.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{FxpError, FxpFormat, FxpValue, RoundingMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CordicError {
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error("iteration {step} is past the end of a {len}-step table")]
    IterationOutOfTable { step: usize, len: usize },
    #[error("{what} = {value} is outside the convergence range (|v| <= {limit})")]
    OutOfRange { what: &'static str, value: f64, limit: f64 },
    #[error("division by zero")]
    DivideByZero,
    #[error("iteration count must be at least 1")]
    NoIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CordicMode {
    Circular,
    Linear,
    Hyperbolic,
}

impl CordicMode {
    /// The coordinate-system coefficient `m`.
    pub fn m(self) -> i64 {
        match self {
            CordicMode::Circular => 1,
            CordicMode::Linear => 0,
            CordicMode::Hyperbolic => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CordicDirection {
    /// Drive `z` toward zero.
    Rotation,
    /// Drive `y` toward zero.
    Vectoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpSign {
    Plus,
    Minus,
}

/// Hyperbolic iteration indices for `n` executed steps: 1, 2, 3, 4, 4, 5, ..., 13, 13, ...
///
/// Indices 4, 13, 40, ... (`k -> 3k + 1`) are executed twice, which is what makes
/// the hyperbolic recurrence converge.
pub fn hyperbolic_indices(n: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(n);
    let mut i = 1;
    let mut repeat = 4;
    while out.len() < n {
        out.push(i);
        if i == repeat && out.len() < n {
            out.push(i);
            repeat = 3 * repeat + 1;
        }
        i += 1;
    }
    out
}

/// Iteration schedule and quantized angle constants for one mode, format and length.
#[derive(Debug, Clone, PartialEq)]
pub struct CordicTable {
    mode: CordicMode,
    fmt: FxpFormat,
    shifts: Vec<i32>,
    angles: Vec<i64>,
    gain: f64,
    inv_gain: FxpValue,
}

/// Quantize a table constant. Constants are stored rounded to nearest.
fn constant(v: f64, fmt: FxpFormat) -> FxpValue {
    FxpValue::quantize(v, fmt, RoundingMode::NearestEven)
}

impl CordicTable {
    fn build(mode: CordicMode, fmt: FxpFormat, shifts: Vec<i32>) -> Self {
        let angles = shifts
            .iter()
            .map(|&i| {
                let t = (-(i as f64)).exp2();
                let e = match mode {
                    CordicMode::Circular => t.atan(),
                    CordicMode::Linear => t,
                    CordicMode::Hyperbolic => t.atanh(),
                };
                constant(e, fmt).raw()
            })
            .collect();
        let gain = shifts
            .iter()
            .map(|&i| {
                let t2 = (-2.0 * i as f64).exp2();
                match mode {
                    CordicMode::Circular => (1.0 + t2).sqrt(),
                    CordicMode::Linear => 1.0,
                    CordicMode::Hyperbolic => (1.0 - t2).sqrt(),
                }
            })
            .product::<f64>();
        let inv_gain = constant(1.0 / gain, fmt);
        Self { mode, fmt, shifts, angles, gain, inv_gain }
    }

    /// Circular table with shifts `0..n`.
    pub fn circular(fmt: FxpFormat, n: usize) -> Self {
        Self::build(CordicMode::Circular, fmt, (0..n as i32).collect())
    }

    /// Hyperbolic table with the repeated-index schedule.
    pub fn hyperbolic(fmt: FxpFormat, n: usize) -> Self {
        Self::build(CordicMode::Hyperbolic, fmt, hyperbolic_indices(n))
    }

    /// Linear table with shifts `start..start + n`. A negative start pre-scales the
    /// convergence range by `2^-start`.
    pub fn linear(fmt: FxpFormat, n: usize, start: i32) -> Self {
        Self::build(CordicMode::Linear, fmt, (start..start + n as i32).collect())
    }

    pub fn mode(&self) -> CordicMode {
        self.mode
    }

    pub fn format(&self) -> FxpFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn shifts(&self) -> &[i32] {
        &self.shifts
    }

    /// Quantized angle constants `E_i`, raw.
    pub fn angles(&self) -> &[i64] {
        &self.angles
    }

    /// Exact (double precision) gain of the schedule.
    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// `1/K` quantized once, used to pre-compensate `x0`.
    pub fn inv_gain(&self) -> FxpValue {
        self.inv_gain
    }

    /// Largest |z0| the rotation can absorb: the sum of the quantized angles, raw.
    pub fn convergence_raw(&self) -> i64 {
        self.angles.iter().sum()
    }
}

/// The `(x, y, z)` triple and the position in the iteration schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CordicState {
    pub x: FxpValue,
    pub y: FxpValue,
    pub z: FxpValue,
    /// Number of steps already executed.
    pub i: usize,
    /// Sticky: set once any update saturated.
    pub saturated: bool,
}

impl CordicState {
    pub fn new(x: FxpValue, y: FxpValue, z: FxpValue) -> Result<Self, CordicError> {
        let f = x.format();
        for v in [y, z] {
            if v.format() != f {
                return Err(FxpError::FormatMismatch(f, v.format()).into());
            }
        }
        Ok(Self { x, y, z, i: 0, saturated: false })
    }
}

/// Shift a raw value by `s` (right for `s >= 0`, left otherwise).
#[inline]
fn shift(v: i128, s: i32) -> i128 {
    if s >= 0 {
        v >> s.min(127)
    } else {
        let l = (-s) as u32;
        v.checked_shl(l).filter(|r| r >> l == v).unwrap_or(if v < 0 { i128::MIN / 2 } else { i128::MAX / 2 })
    }
}

/// Direction `d` for one step. Zero counts as positive.
#[inline]
fn direction(dir: CordicDirection, x: i64, y: i64, z: i64) -> i128 {
    match dir {
        CordicDirection::Rotation => {
            if z >= 0 {
                1
            } else {
                -1
            }
        }
        CordicDirection::Vectoring => {
            if (x >= 0) == (y >= 0) {
                -1
            } else {
                1
            }
        }
    }
}

/// One CORDIC iteration.
pub fn step(s: CordicState, table: &CordicTable, dir: CordicDirection) -> Result<CordicState, CordicError> {
    let fmt = table.format();
    if s.x.format() != fmt {
        return Err(FxpError::FormatMismatch(fmt, s.x.format()).into());
    }
    let Some(&sh) = table.shifts.get(s.i) else {
        return Err(CordicError::IterationOutOfTable { step: s.i, len: table.len() });
    };
    let e = table.angles[s.i] as i128;
    let (x, y, z) = (s.x.raw() as i128, s.y.raw() as i128, s.z.raw() as i128);
    let d = direction(dir, s.x.raw(), s.y.raw(), s.z.raw());
    let m = table.mode().m() as i128;
    let (nx, fx) = FxpValue::from_raw_saturating(x - m * d * shift(y, sh), fmt);
    let (ny, fy) = FxpValue::from_raw_saturating(y + d * shift(x, sh), fmt);
    let (nz, fz) = FxpValue::from_raw_saturating(z - d * e, fmt);
    Ok(CordicState { x: nx, y: ny, z: nz, i: s.i + 1, saturated: s.saturated | fx | fy | fz })
}

/// Run all remaining iterations of `table`.
pub fn run(mut s: CordicState, table: &CordicTable, dir: CordicDirection) -> Result<CordicState, CordicError> {
    while s.i < table.len() {
        s = step(s, table, dir)?;
    }
    Ok(s)
}

/// Smallest `k >= 0` with `|w| < 2^(k+1)` (in units of `one`).
#[inline]
pub(crate) fn prescale_exponent(w: i64, one: i64) -> u32 {
    let mag = w.unsigned_abs() as u128;
    let lim = 2 * one as u128;
    if mag < lim {
        return 0;
    }
    // mag < lim << k  <=>  (mag / lim) < 2^k
    let q = mag / lim;
    128 - q.leading_zeros()
}

/// Raw linear-rotation multiply-accumulate: returns `acc + x*w` and a saturation flag.
///
/// `acc` and `x` are raw values in `fmt` (the accumulator format), `w` shares its
/// fraction bits. Zero weights are skipped. Weights with `|w| >= 2` start the shift
/// schedule at a negative index, which is the same as running the MAC on the
/// mantissa `w * 2^-k` and shifting the product by `k`.
#[inline]
pub(crate) fn mac_raw(acc: i64, x: i64, w: i64, n: u32, fmt: FxpFormat) -> (i64, bool) {
    if w == 0 || x == 0 {
        return (acc, false);
    }
    let frac = fmt.frac_bits() as i32;
    let (lo, hi) = (fmt.min_raw() as i128, fmt.max_raw() as i128);
    let k = prescale_exponent(w, fmt.one_raw()) as i32;
    let mut y = acc as i128;
    let mut z = w as i128;
    let xv = x as i128;
    let mut sat = false;
    for i in -k..(n as i32 - k) {
        let term = shift(xv, i);
        let e: i128 = if i <= frac { 1i128 << (frac - i) } else { 0 };
        if z >= 0 {
            y += term;
            z -= e;
        } else {
            y -= term;
            z += e;
        }
        if y > hi {
            y = hi;
            sat = true;
        } else if y < lo {
            y = lo;
            sat = true;
        }
    }
    (y as i64, sat)
}

/// Direction sequence of a linear rotation, which depends only on the weight.
///
/// The `z` path of a linear rotation never looks at `x` or `y`, so the δ of every
/// step can be decided once per weight and replayed against many inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodedWeight {
    /// Pre-scale exponent: the schedule runs over shifts `-k..n-k`.
    pub k: u32,
    /// Bit `j` set means step `j` subtracts (δ = -1).
    pub minus: u64,
    /// False for a zero weight, whose product is skipped.
    pub active: bool,
}

/// Largest iteration count an [`EncodedWeight`] can hold.
pub const MAX_ENCODED_ITERATIONS: u32 = 64;

/// Record the δ sequence that a linear rotation of `w` (raw, `frac` fraction bits) takes in `n` steps.
pub fn encode_weight(w: i64, n: u32, frac: u32) -> EncodedWeight {
    assert!(n <= MAX_ENCODED_ITERATIONS, "at most {MAX_ENCODED_ITERATIONS} iterations can be encoded");
    if w == 0 {
        return EncodedWeight::default();
    }
    let k = prescale_exponent(w, 1i64 << frac.min(62));
    let mut z = w as i128;
    let mut minus = 0u64;
    for (j, i) in (-(k as i32)..n as i32 - k as i32).enumerate() {
        let e: i128 = if i <= frac as i32 { 1i128 << (frac as i32 - i) } else { 0 };
        if z >= 0 {
            z -= e;
        } else {
            minus |= 1 << j;
            z += e;
        }
    }
    EncodedWeight { k, minus, active: true }
}

/// `acc + x*w` for an encoded weight, with per-step saturation to `[lo, hi]`.
///
/// Bit-identical to running the linear rotation step by step.
#[inline]
pub fn mac_encoded(acc: i64, x: i64, w: EncodedWeight, n: u32, lo: i64, hi: i64) -> (i64, bool) {
    if !w.active || x == 0 {
        return (acc, false);
    }
    let k = w.k as i32;
    // Fast path: when no partial sum can leave the range, clamping is a no-op.
    let reach = (x.unsigned_abs() as u128) << (w.k + 1);
    let fits = (acc as i128 + reach as i128) <= hi as i128 && (acc as i128 - reach as i128) >= lo as i128;
    if fits {
        let mut y = acc;
        let mut bits = w.minus;
        for i in -k..(n as i32 - k) {
            let term = if i >= 0 { x >> i.min(63) } else { x << -i };
            if bits & 1 == 0 {
                y += term;
            } else {
                y -= term;
            }
            bits >>= 1;
        }
        return (y, false);
    }
    let mut y = acc as i128;
    let mut sat = false;
    let mut bits = w.minus;
    for i in -k..(n as i32 - k) {
        let term = shift(x as i128, i);
        if bits & 1 == 0 {
            y += term;
        } else {
            y -= term;
        }
        bits >>= 1;
        if y > hi as i128 {
            y = hi as i128;
            sat = true;
        } else if y < lo as i128 {
            y = lo as i128;
            sat = true;
        }
    }
    (y as i64, sat)
}

fn same_format(vals: &[FxpValue]) -> Result<FxpFormat, CordicError> {
    let f = vals[0].format();
    for v in &vals[1..] {
        if v.format() != f {
            return Err(FxpError::FormatMismatch(f, v.format()).into());
        }
    }
    Ok(f)
}

/// `bias + input * weight` from `n` linear rotation steps with shifts `0..n`.
///
/// Requires `|weight| < 2`; use [`linear_mac_prescaled`] for larger weights. A zero
/// weight returns `bias` unchanged (the product is skipped, as for a pruned weight).
pub fn linear_mac(input: FxpValue, weight: FxpValue, bias: FxpValue, n: usize) -> Result<FxpValue, CordicError> {
    let fmt = same_format(&[input, weight, bias])?;
    if n == 0 {
        return Err(CordicError::NoIterations);
    }
    if weight.raw().unsigned_abs() >= 2 * fmt.one_raw() as u64 {
        return Err(CordicError::OutOfRange { what: "weight", value: weight.to_real(), limit: 2.0 });
    }
    if weight.raw() == 0 {
        return Ok(bias);
    }
    let table = CordicTable::linear(fmt, n, 0);
    let s = run(CordicState::new(input, bias, weight)?, &table, CordicDirection::Rotation)?;
    Ok(s.y)
}

/// [`linear_mac`] for any weight: `weight = m * 2^k` with `|m| < 2`, the product of
/// the mantissa is shifted back by `k`. Returns the saturation flag alongside.
pub fn linear_mac_prescaled(
    input: FxpValue,
    weight: FxpValue,
    bias: FxpValue,
    n: usize,
) -> Result<(FxpValue, bool), CordicError> {
    let fmt = same_format(&[input, weight, bias])?;
    if n == 0 {
        return Err(CordicError::NoIterations);
    }
    let (raw, sat) = mac_raw(bias.raw(), input.raw(), weight.raw(), n as u32, fmt);
    Ok((FxpValue::from_raw(raw, fmt)?, sat))
}

/// Extra fraction bits carried by the `x`/`y` registers of the rotation units.
///
/// `ceil(log2 n) + 2` bits keep the truncation of `n` shifted adds below a quarter
/// ULP, so the outputs are limited by the angle table rather than by rounding.
pub fn rotation_guard_bits(n: usize) -> u32 {
    usize::BITS - n.max(1).saturating_sub(1).leading_zeros() + 2
}

/// Rotation (`z -> 0`) of `(x0, 0, z0)` with guarded `x`/`y` registers.
///
/// Returns `x`, `y` still carrying `guard` extra fraction bits, and a saturation flag.
pub(crate) fn rotate_guarded(table: &CordicTable, x0: i64, z0: i64, guard: u32) -> (i128, i128, bool) {
    let fmt = table.format();
    let (lo, hi) = ((fmt.min_raw() as i128) << guard, ((fmt.max_raw() as i128) << guard) | ((1 << guard) - 1));
    let m = table.mode().m() as i128;
    let mut x = (x0 as i128) << guard;
    let mut y = 0i128;
    let mut z = z0 as i128;
    let mut sat = false;
    let clamp = |v: i128, sat: &mut bool| {
        if v > hi {
            *sat = true;
            hi
        } else if v < lo {
            *sat = true;
            lo
        } else {
            v
        }
    };
    for (&sh, &e) in table.shifts.iter().zip(&table.angles) {
        let (tx, ty) = (shift(x, sh), shift(y, sh));
        let d: i128 = if z >= 0 { 1 } else { -1 };
        x = clamp(x - m * d * ty, &mut sat);
        y = clamp(y + d * tx, &mut sat);
        z -= d * e as i128;
    }
    (x, y, sat)
}

fn unguard(v: i128, guard: u32, fmt: FxpFormat) -> FxpValue {
    FxpValue::from_raw_saturating(v >> guard, fmt).0
}

fn check_angle(angle: FxpValue, table: &CordicTable) -> Result<(), CordicError> {
    let lim = table.convergence_raw();
    if angle.raw().unsigned_abs() > lim as u64 {
        return Err(CordicError::OutOfRange {
            what: "angle",
            value: angle.to_real(),
            limit: lim as f64 * angle.format().ulp(),
        });
    }
    Ok(())
}

/// `(cosh(angle), sinh(angle))` by hyperbolic rotation from `(1/K_h, 0, angle)`.
///
/// The `x`/`y` registers carry [`rotation_guard_bits`] extra fraction bits; results
/// are truncated back to the working format.
pub fn hyperbolic_rotate(angle: FxpValue, n: usize) -> Result<(FxpValue, FxpValue), CordicError> {
    if n == 0 {
        return Err(CordicError::NoIterations);
    }
    let fmt = angle.format();
    let table = CordicTable::hyperbolic(fmt, n);
    check_angle(angle, &table)?;
    let g = rotation_guard_bits(n);
    let (x, y, _) = rotate_guarded(&table, table.inv_gain().raw(), angle.raw(), g);
    Ok((unguard(x, g, fmt), unguard(y, g, fmt)))
}

/// `(cos(angle), sin(angle))` by circular rotation from `(1/K_c, 0, angle)`.
pub fn circular_rotate(angle: FxpValue, n: usize) -> Result<(FxpValue, FxpValue), CordicError> {
    if n == 0 {
        return Err(CordicError::NoIterations);
    }
    let fmt = angle.format();
    let table = CordicTable::circular(fmt, n);
    check_angle(angle, &table)?;
    let g = rotation_guard_bits(n);
    let (x, y, _) = rotate_guarded(&table, table.inv_gain().raw(), angle.raw(), g);
    Ok((unguard(x, g, fmt), unguard(y, g, fmt)))
}

/// Hyperbolic exponential unit: argument reduction plus one hyperbolic rotation.
///
/// Angles inside the convergence range are rotated directly. Larger ones are split
/// as `a = k*ln2 + r` with `|r| <= ln2/2`; then `e^(±a) = 2^(±k) * (cosh r ± sinh r)`.
#[derive(Debug, Clone)]
pub struct ExpUnit {
    table: CordicTable,
    ln2: i64,
}

/// `cosh`/`sinh` of the reduced angle plus the power-of-two exponent `k`.
///
/// `cosh` and `sinh` are raw values with `guard` fraction bits beyond the working format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpParts {
    pub k: i32,
    pub cosh: i128,
    pub sinh: i128,
    pub guard: u32,
    pub saturated: bool,
}

impl ExpParts {
    /// Guarded mantissa of `e^(+a)`; the value is `mant * 2^(k - guard)` raw.
    pub fn plus_mant(&self) -> i128 {
        self.cosh + self.sinh
    }

    /// Guarded mantissa of `e^(-a)`; the value is `mant * 2^(-k - guard)` raw.
    pub fn minus_mant(&self) -> i128 {
        self.cosh - self.sinh
    }
}

/// `mant * 2^s` truncated toward negative infinity, with a huge value of the right
/// sign when it would overflow.
pub(crate) fn scale_i128(mant: i128, s: i64) -> i128 {
    if s >= 0 {
        let l = s.min(126) as u32;
        mant.checked_shl(l).filter(|v| v >> l == mant).unwrap_or(if mant < 0 { i128::MIN >> 4 } else { i128::MAX >> 4 })
    } else {
        mant >> (-s).min(127)
    }
}

impl ExpUnit {
    pub fn new(fmt: FxpFormat, n: usize) -> Result<Self, CordicError> {
        if n == 0 {
            return Err(CordicError::NoIterations);
        }
        let ln2 = constant(std::f64::consts::LN_2, fmt).raw().max(1);
        Ok(Self { table: CordicTable::hyperbolic(fmt, n), ln2 })
    }

    pub fn format(&self) -> FxpFormat {
        self.table.format()
    }

    pub fn iterations(&self) -> usize {
        self.table.len()
    }

    pub fn table(&self) -> &CordicTable {
        &self.table
    }

    /// Reduce and rotate a raw angle.
    pub fn parts(&self, angle: i64) -> ExpParts {
        let (k, r) = if angle.unsigned_abs() > self.table.convergence_raw() as u64 {
            let a = angle as i128;
            let l = self.ln2 as i128;
            // nearest integer, ties away from zero
            let k = if a >= 0 { (2 * a + l) / (2 * l) } else { -((-2 * a + l) / (2 * l)) };
            (k as i32, (a - k * l) as i64)
        } else {
            (0, angle)
        };
        let g = rotation_guard_bits(self.table.len());
        let (c, s, sat) = rotate_guarded(&self.table, self.table.inv_gain().raw(), r, g);
        ExpParts { k, cosh: c, sinh: s, guard: g, saturated: sat }
    }

    /// `e^(±angle)` in the working format, saturating above and flushing to zero below.
    pub fn exp(&self, angle: FxpValue, sign: ExpSign) -> (FxpValue, bool) {
        let fmt = self.format();
        let p = self.parts(angle.raw());
        let (mant, k) = match sign {
            ExpSign::Plus => (p.plus_mant(), p.k),
            ExpSign::Minus => (p.minus_mant(), -p.k),
        };
        let (v, s) = FxpValue::from_raw_saturating(scale_i128(mant, k as i64 - p.guard as i64), fmt);
        (v, p.saturated | s)
    }
}

/// `e^(+angle)` (`cosh + sinh`) or `e^(-angle)` (`cosh - sinh`).
pub fn exp_of(angle: FxpValue, n: usize, sign: ExpSign) -> Result<FxpValue, CordicError> {
    Ok(ExpUnit::new(angle.format(), n)?.exp(angle, sign).0)
}

/// Fraction bits of the internal division datapath.
const DIV_PRECISION: u32 = 62;

/// Raw linear-vectoring division; the result carries `frac` fraction bits, truncated.
///
/// The operands are scaled jointly so the denominator's leading one sits at
/// `2^62` (that is, `den` in `[1, 2)` at 62 fraction bits). Quotients above 1 are
/// handled by comparing against `den * 2^e` and shifting the result back by `e`,
/// so the shift schedule always starts at 1. Results too large for an `i128`
/// come back as a huge value of the right sign for the caller to saturate.
pub(crate) fn divide_raw(num: i128, den: i128, n: u32, frac: u32) -> i128 {
    const HUGE: i128 = i128::MAX >> 4;
    debug_assert!(den != 0);
    if num == 0 {
        return 0;
    }
    let (mut num, mut den) = if den < 0 { (-num, -den) } else { (num, den) };
    let msb = 127 - den.leading_zeros();
    if msb > DIV_PRECISION {
        let s = msb - DIV_PRECISION;
        num >>= s;
        den >>= s;
    } else {
        let s = DIV_PRECISION - msb;
        if num.unsigned_abs().leading_zeros() <= s + 1 {
            return if num < 0 { -HUGE } else { HUGE };
        }
        num <<= s;
        den <<= s;
    }
    let mut e = 0u32;
    while num.abs() > (den << e) {
        e += 1;
    }
    let x = den << e;
    let mut y = num;
    let mut z = 0i128;
    for i in 1..=n.min(126) {
        let term = x >> i;
        let ang: i128 = if i <= DIV_PRECISION { 1i128 << (DIV_PRECISION - i) } else { 0 };
        if y >= 0 {
            y -= term;
            z += ang;
        } else {
            y += term;
            z -= ang;
        }
    }
    let s = DIV_PRECISION as i32 - frac as i32 - e as i32;
    if s >= 0 {
        z >> s
    } else {
        let l = (-s) as u32;
        match z.checked_shl(l).filter(|v| v >> l == z) {
            Some(v) => v,
            None => if z < 0 { -HUGE } else { HUGE },
        }
    }
}

/// `num / den` by linear vectoring from `(den, num, 0)`.
///
/// Numerator and denominator are first scaled by the same power of two so the
/// denominator lies in `[1, 2)`; the quotient is then accumulated in `z` over `n`
/// steps with shifts `1..=n` (quotients above 1 are pre-scaled by a power of two).
/// Saturates when the quotient does not fit the format.
pub fn linear_divide(num: FxpValue, den: FxpValue, n: usize) -> Result<FxpValue, CordicError> {
    let fmt = same_format(&[num, den])?;
    if n == 0 {
        return Err(CordicError::NoIterations);
    }
    if den.raw() == 0 {
        return Err(CordicError::DivideByZero);
    }
    if num.raw() == 0 {
        return Ok(FxpValue::zero(fmt));
    }
    let q = divide_raw(num.raw() as i128, den.raw() as i128, n as u32, fmt.frac_bits());
    Ok(FxpValue::from_raw_saturating(q, fmt).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: f64, f: FxpFormat) -> FxpValue {
        FxpValue::quantize(v, f, RoundingMode::Truncate)
    }

    #[test]
    fn hyperbolic_schedule_repeats() {
        assert_eq!(hyperbolic_indices(5), vec![1, 2, 3, 4, 4]);
        let s = hyperbolic_indices(16);
        assert_eq!(s.len(), 16);
        assert_eq!(&s[..6], &[1, 2, 3, 4, 4, 5]);
        assert_eq!(s[13], 13);
        assert_eq!(s[14], 13);
        assert_eq!(hyperbolic_indices(4), vec![1, 2, 3, 4]);
    }

    #[test]
    fn linear_step_from_zero_angle() {
        let f = FxpFormat::Q16_8;
        for start in 0..4 {
            let t = CordicTable::linear(f, 1, start);
            let s = CordicState::new(q(1.0, f), q(0.0, f), q(0.0, f)).unwrap();
            let s = step(s, &t, CordicDirection::Rotation).unwrap();
            let p = (-(start as f64)).exp2();
            assert_eq!(s.y.to_real(), p);
            assert_eq!(s.z.to_real(), -p);
            assert_eq!(s.x.to_real(), 1.0);
        }
    }

    #[test]
    fn step_past_table_rejected() {
        let f = FxpFormat::Q8_4;
        let t = CordicTable::linear(f, 2, 0);
        let mut s = CordicState::new(q(1.0, f), q(0.0, f), q(0.5, f)).unwrap();
        s = run(s, &t, CordicDirection::Rotation).unwrap();
        assert!(matches!(step(s, &t, CordicDirection::Rotation), Err(CordicError::IterationOutOfTable { .. })));
    }

    #[test]
    fn linear_mac_zero_weight_is_bias() {
        let f = FxpFormat::Q8_4;
        for x in [-8.0, -1.5, 0.0, 3.25, 7.9375] {
            for b in [-2.0, 0.0, 0.6875] {
                for n in 1..8 {
                    assert_eq!(linear_mac(q(x, f), q(0.0, f), q(b, f), n).unwrap(), q(b, f));
                }
            }
        }
    }

    #[test]
    fn linear_mac_range_error() {
        let f = FxpFormat::Q8_4;
        assert!(matches!(linear_mac(q(1.0, f), q(2.0, f), q(0.0, f), 5), Err(CordicError::OutOfRange { .. })));
        let (v, _) = linear_mac_prescaled(q(1.0, f), q(3.0, f), q(0.0, f), 8).unwrap();
        assert!((v.to_real() - 3.0).abs() <= 0.25);
    }

    #[test]
    fn hyperbolic_identity_rotation() {
        for f in [FxpFormat::Q8_4, FxpFormat::Q16_8, FxpFormat::Q32_16] {
            for n in 1..=32 {
                let (c, s) = hyperbolic_rotate(FxpValue::zero(f), n).unwrap();
                // z can only be driven to within the last angle of zero
                let last = *hyperbolic_indices(n).last().unwrap();
                let resid = (-(last as f64)).exp2().atanh();
                let tol = 2.0 * f.ulp() + if last as u32 <= f.frac_bits() { 2.5 * resid } else { 0.0 };
                assert!((c.to_real() - 1.0).abs() <= tol, "{f} n={n} cosh={c}");
                assert!(s.to_real().abs() <= tol, "{f} n={n} sinh={s}");
            }
        }
    }

    #[test]
    fn exp_underflow_and_unity() {
        let f = FxpFormat::Q16_8;
        assert_eq!(exp_of(q(8.0, f), 16, ExpSign::Minus).unwrap().raw(), 0);
        let one = exp_of(q(0.0, f), 16, ExpSign::Minus).unwrap();
        assert!((one.to_real() - 1.0).abs() <= 2.0 * f.ulp());
        let big = exp_of(q(100.0, f), 16, ExpSign::Plus).unwrap();
        assert_eq!(big.raw(), f.max_raw());
    }

    #[test]
    fn divide_examples() {
        let f = FxpFormat::Q16_8;
        assert_eq!(linear_divide(q(0.0, f), q(3.0, f), 8).unwrap().raw(), 0);
        assert!(matches!(linear_divide(q(1.0, f), q(0.0, f), 8), Err(CordicError::DivideByZero)));
        let h = linear_divide(q(1.0, f), q(2.0, f), 16).unwrap();
        assert!((h.to_real() - 0.5).abs() <= 2.0 * f.ulp());
        let neg = linear_divide(q(-1.5, f), q(0.5, f), 16).unwrap();
        assert!((neg.to_real() + 3.0).abs() <= 4.0 * f.ulp(), "{neg}");
    }

    #[test]
    fn prescale_exponent_boundaries() {
        let one = 16;
        assert_eq!(prescale_exponent(31, one), 0);
        assert_eq!(prescale_exponent(32, one), 1);
        assert_eq!(prescale_exponent(-63, one), 1);
        assert_eq!(prescale_exponent(64, one), 2);
        assert_eq!(prescale_exponent(-127, one), 2);
        assert_eq!(prescale_exponent(-128, one), 3);
    }
}
