//! Error analysis: sweeps over format × iteration count against a double-precision
//! oracle, the four error metrics, and the normalized MAC error metrics.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{self, ExpSign, ExpUnit};
use crate::fxp::{FxpFormat, FxpValue, RoundingMode};
use crate::rpe::{AfKind, Rpe, RpeConfig, RpeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("metrics need at least one sample")]
    NoSamples,
    #[error("reference has {0} samples but output has {1}")]
    LengthMismatch(usize, usize),
    #[error("exhaustive grid over {0} is too large (at most {1} word bits)")]
    GridTooLarge(FxpFormat, u32),
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Rpe(#[from] RpeError),
    #[error(transparent)]
    Cordic(#[from] cordic::CordicError),
}

/// Error metrics of an output vector against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean of `|y - x| / |x|` over samples with `x != 0`.
    pub avg_rel_err: f64,
    /// `sum((x_i - mean(y))^2) / (n - 1)`: reference samples spread around the output mean.
    pub std_cross: Option<f64>,
    /// Sample standard deviation of the signed error `y - x`.
    pub std_conventional: Option<f64>,
    pub max_abs: f64,
    pub n: usize,
    /// Samples left out of `avg_rel_err` because the reference was zero.
    pub rel_skipped: usize,
}

/// MSE, MAE, average relative error and both dispersion figures.
pub fn metrics(reference: &[f64], output: &[f64]) -> Result<ErrorMetrics, AnalysisError> {
    if reference.len() != output.len() {
        return Err(AnalysisError::LengthMismatch(reference.len(), output.len()));
    }
    let n = reference.len();
    if n == 0 {
        return Err(AnalysisError::NoSamples);
    }
    let nf = n as f64;
    let (mut se, mut ae, mut re, mut mx, mut skipped) = (0.0, 0.0, 0.0, 0.0f64, 0usize);
    for (&x, &y) in reference.iter().zip(output) {
        let e = y - x;
        se += e * e;
        ae += e.abs();
        mx = mx.max(e.abs());
        if x == 0.0 {
            skipped += 1;
        } else {
            re += e.abs() / x.abs();
        }
    }
    let (std_cross, std_conventional) = if n > 1 {
        let mean_y = output.iter().sum::<f64>() / nf;
        let sp = reference.iter().map(|x| (x - mean_y).powi(2)).sum::<f64>() / (nf - 1.0);
        let mean_e = output.iter().zip(reference).map(|(y, x)| y - x).sum::<f64>() / nf;
        let var = output.iter().zip(reference).map(|(y, x)| (y - x - mean_e).powi(2)).sum::<f64>() / (nf - 1.0);
        (Some(sp), Some(var.sqrt()))
    } else {
        (None, None)
    };
    let counted = n - skipped;
    Ok(ErrorMetrics {
        mse: se / nf,
        mae: ae / nf,
        avg_rel_err: if counted > 0 { re / counted as f64 } else { 0.0 },
        std_cross,
        std_conventional,
        max_abs: mx,
        n,
        rel_skipped: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepFunction {
    Mac,
    Tanh,
    Sigmoid,
    Softmax,
    Gelu,
    Selu,
    Swish,
    /// `e^-x`, the exponential used by sigmoid.
    Exp,
}

impl SweepFunction {
    pub const ALL: [SweepFunction; 8] = [
        SweepFunction::Mac,
        SweepFunction::Tanh,
        SweepFunction::Sigmoid,
        SweepFunction::Softmax,
        SweepFunction::Gelu,
        SweepFunction::Selu,
        SweepFunction::Swish,
        SweepFunction::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepFunction::Mac => "mac",
            SweepFunction::Tanh => "tanh",
            SweepFunction::Sigmoid => "sigmoid",
            SweepFunction::Softmax => "softmax",
            SweepFunction::Gelu => "gelu",
            SweepFunction::Selu => "selu",
            SweepFunction::Swish => "swish",
            SweepFunction::Exp => "exp",
        }
    }

    fn af(self) -> Option<AfKind> {
        Some(match self {
            SweepFunction::Tanh => AfKind::Tanh,
            SweepFunction::Sigmoid => AfKind::Sigmoid,
            SweepFunction::Softmax => AfKind::Softmax,
            SweepFunction::Gelu => AfKind::Gelu,
            SweepFunction::Selu => AfKind::Selu,
            SweepFunction::Swish => AfKind::Swish,
            SweepFunction::Mac | SweepFunction::Exp => return None,
        })
    }
}

impl std::fmt::Display for SweepFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepFunction {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepFunction::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AnalysisError::Spec(format!("unknown function `{s}`")))
    }
}

/// Widest format an exhaustive input grid accepts.
pub const EXHAUSTIVE_MAX_BITS: u32 = 16;
/// Widest format for the exhaustive (input, weight) MAC sweep.
pub const MAC_EXHAUSTIVE_MAX_BITS: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputGrid {
    /// Every representable value of the format.
    Exhaustive,
    Uniform { lo: f64, hi: f64, steps: usize },
    Explicit(Vec<f64>),
}

impl std::fmt::Display for InputGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputGrid::Exhaustive => f.write_str("exhaustive"),
            InputGrid::Uniform { lo, hi, steps } => write!(f, "uniform:{lo}:{hi}:{steps}"),
            InputGrid::Explicit(v) => {
                let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "list:{}", items.join(","))
            }
        }
    }
}

impl std::str::FromStr for InputGrid {
    type Err = AnalysisError;

    /// `exhaustive`, `uniform:LO:HI:STEPS` or `list:V1,V2,...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalysisError::Spec(format!("bad grid `{s}` (exhaustive | uniform:LO:HI:STEPS | list:A,B,...)"));
        let s = s.trim();
        if s == "exhaustive" {
            return Ok(InputGrid::Exhaustive);
        }
        if let Some(rest) = s.strip_prefix("uniform:") {
            let p: Vec<&str> = rest.split(':').collect();
            if p.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = p[0].parse().map_err(|_| bad())?;
            let hi: f64 = p[1].parse().map_err(|_| bad())?;
            let steps: usize = p[2].parse().map_err(|_| bad())?;
            if steps < 1 || !(lo <= hi) {
                return Err(bad());
            }
            return Ok(InputGrid::Uniform { lo, hi, steps });
        }
        if let Some(rest) = s.strip_prefix("list:") {
            let v: Result<Vec<f64>, _> = rest.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let v = v.map_err(|_| bad())?;
            if v.is_empty() {
                return Err(bad());
            }
            return Ok(InputGrid::Explicit(v));
        }
        Err(bad())
    }
}

impl InputGrid {
    /// Grid points quantized to `fmt`, in order.
    pub fn points(&self, fmt: FxpFormat, mode: RoundingMode) -> Result<Vec<FxpValue>, AnalysisError> {
        Ok(match self {
            InputGrid::Exhaustive => {
                if fmt.word_bits() > EXHAUSTIVE_MAX_BITS {
                    return Err(AnalysisError::GridTooLarge(fmt, EXHAUSTIVE_MAX_BITS));
                }
                fmt.all_raw().map(|r| FxpValue::from_raw(r, fmt).expect("in range")).collect()
            }
            InputGrid::Uniform { lo, hi, steps } => (0..*steps)
                .map(|i| {
                    let t = if *steps == 1 { 0.0 } else { i as f64 / (*steps - 1) as f64 };
                    FxpValue::quantize(lo + (hi - lo) * t, fmt, mode)
                })
                .collect(),
            InputGrid::Explicit(v) => v.iter().map(|&x| FxpValue::quantize(x, fmt, mode)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub function: SweepFunction,
    pub formats: Vec<FxpFormat>,
    /// Inclusive iteration range.
    pub iterations: (u32, u32),
    pub grid: InputGrid,
    pub rounding: RoundingMode,
    /// Seed for the random softmax vectors.
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(function: SweepFunction, formats: Vec<FxpFormat>, iterations: (u32, u32), grid: InputGrid) -> Self {
        Self { function, formats, iterations, grid, rounding: RoundingMode::Truncate, seed: 42 }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.formats.is_empty() {
            return Err(AnalysisError::Spec("no formats".into()));
        }
        let (a, b) = self.iterations;
        if a < 1 || a > b || b > 64 {
            return Err(AnalysisError::Spec(format!("iteration range {a}..{b} must satisfy 1 <= lo <= hi <= 64")));
        }
        if self.grid == InputGrid::Exhaustive {
            // the MAC sweep pairs every input with every weight
            let limit = if self.function == SweepFunction::Mac { MAC_EXHAUSTIVE_MAX_BITS } else { EXHAUSTIVE_MAX_BITS };
            if let Some(f) = self.formats.iter().find(|f| f.word_bits() > limit) {
                return Err(AnalysisError::GridTooLarge(*f, limit));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub function: SweepFunction,
    pub format: FxpFormat,
    pub iterations: u32,
    pub metrics: ErrorMetrics,
    /// Inputs moved into the convergence or representable range before evaluation.
    pub clamped: usize,
}

/// Length of the random softmax vectors.
pub const SOFTMAX_VECTOR_LEN: usize = 10;

/// Number of softmax vectors drawn for a grid of `points` values.
fn softmax_vector_count(points: usize) -> usize {
    points.clamp(64, 1000)
}

/// One row per (format, iteration count), format-major. Rows are computed in
/// parallel; the result does not depend on scheduling.
pub fn pareto_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, AnalysisError> {
    spec.validate()?;
    let (a, b) = spec.iterations;
    let jobs: Vec<(FxpFormat, u32)> = spec.formats.iter().flat_map(|&f| (a..=b).map(move |n| (f, n))).collect();
    jobs.par_iter().map(|&(f, n)| sweep_row(spec, f, n)).collect()
}

fn sweep_row(spec: &SweepSpec, fmt: FxpFormat, n: u32) -> Result<SweepRow, AnalysisError> {
    let pts = spec.grid.points(fmt, spec.rounding)?;
    let mut refs = Vec::new();
    let mut outs = Vec::new();
    let mut clamped = 0;
    match spec.function {
        SweepFunction::Mac => {
            let two = 2 * fmt.one_raw();
            for &x in &pts {
                for &w in &pts {
                    let wr = w.raw().clamp(-two + 1, two - 1);
                    if wr != w.raw() {
                        clamped += 1;
                        continue;
                    }
                    let exact = (x.to_real() * w.to_real()).clamp(fmt.min_value(), fmt.max_value());
                    let y = cordic::linear_mac(x, w, FxpValue::zero(fmt), n as usize)?;
                    refs.push(exact);
                    outs.push(y.to_real());
                }
            }
        }
        SweepFunction::Exp => {
            let unit = ExpUnit::new(fmt, n as usize)?;
            // e^-x must be representable: x >= -ln(max)
            let lo = FxpValue::quantize(-fmt.max_value().ln(), fmt, RoundingMode::Truncate).raw() + 1;
            for &x in &pts {
                let xr = x.raw().max(lo);
                if xr != x.raw() {
                    clamped += 1;
                }
                let xv = FxpValue::from_raw(xr, fmt).expect("in range");
                refs.push((-xv.to_real()).exp());
                outs.push(unit.exp(xv, ExpSign::Minus).0.to_real());
            }
        }
        SweepFunction::Softmax => {
            let cfg = RpeConfig { af: AfKind::Softmax, softmax_len: SOFTMAX_VECTOR_LEN, ..RpeConfig::default() }
                .with_format(fmt)
                .with_iterations(n);
            let rpe = Rpe::new(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for _ in 0..softmax_vector_count(pts.len()) {
                let v: Vec<FxpValue> = (0..SOFTMAX_VECTOR_LEN).map(|_| pts[rng.random_range(0..pts.len())]).collect();
                let reals: Vec<f64> = v.iter().map(|x| x.to_real()).collect();
                let m = reals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = reals.iter().map(|r| (r - m).exp()).sum();
                let p = rpe.softmax(&v)?;
                for (r, q) in reals.iter().zip(&p.probs) {
                    refs.push((r - m).exp() / s);
                    outs.push(q.to_real());
                }
            }
        }
        other => {
            let af = other.af().expect("scalar activation");
            let rpe = Rpe::new(RpeConfig::default().with_af(af).with_format(fmt).with_iterations(n))?;
            for &x in &pts {
                refs.push(af.reference(x.to_real()).expect("scalar"));
                outs.push(rpe.activate(x)?.value.to_real());
            }
        }
    }
    Ok(SweepRow { function: spec.function, format: fmt, iterations: n, metrics: metrics(&refs, &outs)?, clamped })
}

pub const CSV_HEADER: &str = "function,format,iterations,mse,mae,avg_rel_err,std_cross,std_conventional,clamped,n_samples";

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "NA".into())
}

/// CSV table; `comments` become leading `# ` lines (configuration echo).
pub fn rows_to_csv(rows: &[SweepRow], comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str("# ");
        s.push_str(c);
        s.push('\n');
    }
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.function,
            r.format,
            r.iterations,
            num(m.mse),
            num(m.mae),
            num(m.avg_rel_err),
            opt(m.std_cross),
            opt(m.std_conventional),
            r.clamped,
            m.n
        ));
    }
    s
}

/// Smallest iteration count after which MAE stays within `tol` (relative) of the
/// best MAE of the sweep. `rows` must be one format's rows in iteration order.
pub fn plateau_start(rows: &[SweepRow], tol: f64) -> Option<u32> {
    let best = rows.iter().map(|r| r.metrics.mae).fold(f64::INFINITY, f64::min);
    let mut start = None;
    for r in rows.iter().rev() {
        if r.metrics.mae <= best * (1.0 + tol) + f64::EPSILON {
            start = Some(r.iterations);
        } else {
            break;
        }
    }
    start
}

/// Whether MAE never grows by more than `tol` (relative) from one iteration count to the next.
pub fn mae_non_increasing(rows: &[SweepRow], tol: f64) -> bool {
    rows.windows(2).all(|w| w[1].metrics.mae <= w[0].metrics.mae * (1.0 + tol) + f64::EPSILON)
}

/// Normalized error metrics of the MAC over every operand pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMacMetrics {
    /// `|mean(signed error)| / norm`.
    pub normalized_mean_error: f64,
    /// `mean(|error|) / norm`.
    pub nmed: f64,
    /// `mean(|error| / |exact|)` over pairs with a nonzero exact product.
    pub mred: f64,
    /// `max(|error|) / norm`.
    pub nmax_ed: f64,
    /// The normalizer: the largest product magnitude, `2^(2 * int_bits)`.
    pub norm: f64,
    pub samples: usize,
}

/// Exhaustive sweep of `(input, weight)` pairs with zero bias.
///
/// Products are accumulated in a double-width register so that no pair saturates,
/// and weights of magnitude 2 or more take the pre-scaled shift schedule.
pub fn mac_normalized_metrics(fmt: FxpFormat, iterations: u32) -> Result<NormalizedMacMetrics, AnalysisError> {
    if fmt.word_bits() > MAC_EXHAUSTIVE_MAX_BITS {
        return Err(AnalysisError::GridTooLarge(fmt, MAC_EXHAUSTIVE_MAX_BITS));
    }
    if iterations == 0 {
        return Err(AnalysisError::Spec("iterations must be at least 1".into()));
    }
    let wide = fmt.widened(fmt.word_bits());
    let ulp = fmt.ulp();
    let norm = (2.0f64).powi(2 * fmt.int_bits() as i32);
    let (mut signed, mut abs, mut rel, mut mx) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut n, mut nrel) = (0usize, 0usize);
    for x in fmt.all_raw() {
        for w in fmt.all_raw() {
            let (y, _) = cordic::mac_raw(0, x, w, iterations, wide);
            let exact = (x as f64) * (w as f64) * ulp * ulp;
            let e = y as f64 * ulp - exact;
            signed += e;
            abs += e.abs();
            mx = mx.max(e.abs());
            if exact != 0.0 {
                rel += e.abs() / exact.abs();
                nrel += 1;
            }
            n += 1;
        }
    }
    Ok(NormalizedMacMetrics {
        normalized_mean_error: (signed / n as f64).abs() / norm,
        nmed: abs / n as f64 / norm,
        mred: if nrel > 0 { rel / nrel as f64 } else { 0.0 },
        nmax_ed: mx / norm,
        norm,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors() {
        let v = [1.0, -2.0, 0.5];
        let m = metrics(&v, &v).unwrap();
        assert_eq!((m.mse, m.mae, m.avg_rel_err), (0.0, 0.0, 0.0));
        assert_eq!(m.std_conventional, Some(0.0));
    }

    #[test]
    fn two_points() {
        let m = metrics(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.mse, 0.5);
        assert_eq!(m.mae, 0.5);
        assert_eq!(m.avg_rel_err, 0.25);
    }

    #[test]
    fn single_sample_has_no_std() {
        let m = metrics(&[1.0], &[1.5]).unwrap();
        assert!(m.std_cross.is_none() && m.std_conventional.is_none());
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_reference_is_skipped() {
        let m = metrics(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.rel_skipped, 1);
        assert_eq!(m.avg_rel_err, 0.5);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!("exhaustive".parse::<InputGrid>().unwrap(), InputGrid::Exhaustive);
        assert_eq!(
            "uniform:-4:4:81".parse::<InputGrid>().unwrap(),
            InputGrid::Uniform { lo: -4.0, hi: 4.0, steps: 81 }
        );
        assert!("uniform:1:0:3".parse::<InputGrid>().is_err());
        assert!("list:".parse::<InputGrid>().is_err());
    }
}
