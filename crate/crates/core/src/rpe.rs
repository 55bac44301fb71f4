//! The reconfigurable processing element: a pipelined linear-CORDIC MAC followed by
//! an iterative hyperbolic stage and a division stage, plus the control FSM.
//!
//! The MAC issues one product per cycle into a `mac_stages`-deep pipeline, each
//! stage doing one linear CORDIC iteration, so a stream of `len` products takes
//! `len + mac_stages - 1` cycles. The activation function then runs on the
//! accumulator; the hyperbolic and division stages each take one cycle per
//! iteration. Cycle counts depend only on the configuration and the lengths.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{
    self, divide_raw, encode_weight, mac_encoded, CordicError, ExpSign, ExpUnit, MAX_ENCODED_ITERATIONS,
};
use crate::fxp::{FxpError, FxpFormat, FxpValue, RoundingMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RpeError {
    #[error(transparent)]
    Cordic(#[from] CordicError),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error("length mismatch: {inputs} inputs vs {weights} weights")]
    LengthMismatch { inputs: usize, weights: usize },
    #[error("empty input")]
    Empty,
    #[error("softmax denominator is zero; inputs {underflowed:?} underflowed")]
    DegenerateSoftmax { underflowed: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AfKind {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Gelu,
    Selu,
    Swish,
    None,
}

impl AfKind {
    pub const ALL: [AfKind; 8] = [
        AfKind::Relu,
        AfKind::Tanh,
        AfKind::Sigmoid,
        AfKind::Softmax,
        AfKind::Gelu,
        AfKind::Selu,
        AfKind::Swish,
        AfKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AfKind::Relu => "relu",
            AfKind::Tanh => "tanh",
            AfKind::Sigmoid => "sigmoid",
            AfKind::Softmax => "softmax",
            AfKind::Gelu => "gelu",
            AfKind::Selu => "selu",
            AfKind::Swish => "swish",
            AfKind::None => "none",
        }
    }

    /// Double-precision reference of the scalar functions (softmax has none).
    pub fn reference(self, x: f64) -> Option<f64> {
        const L: f64 = 1.050_700_987_355_480_5;
        const A: f64 = 1.673_263_242_354_377_2;
        Some(match self {
            AfKind::Relu => x.max(0.0),
            AfKind::Tanh => x.tanh(),
            AfKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            AfKind::Gelu => 0.5 * x * (1.0 + (0.797_884_560_8 * (x + 0.044_715 * x * x * x)).tanh()),
            AfKind::Selu => {
                if x > 0.0 {
                    L * x
                } else {
                    L * A * (x.exp() - 1.0)
                }
            }
            AfKind::Swish => x / (1.0 + (-x).exp()),
            AfKind::None => x,
            AfKind::Softmax => return None,
        })
    }
}

impl fmt::Display for AfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AfKind {
    type Err = RpeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AfKind::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RpeError::Config(format!("unknown activation function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpeConfig {
    pub format: FxpFormat,
    /// Depth of the MAC pipeline; also the number of linear iterations per product.
    pub mac_stages: u32,
    pub hyp_iterations: u32,
    pub div_iterations: u32,
    pub af: AfKind,
    /// Vector length for softmax programs.
    pub softmax_len: usize,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self {
            format: FxpFormat::Q8_4,
            mac_stages: 5,
            hyp_iterations: 5,
            div_iterations: 4,
            af: AfKind::Relu,
            softmax_len: 1,
        }
    }
}

impl RpeConfig {
    pub fn with_af(mut self, af: AfKind) -> Self {
        self.af = af;
        self
    }

    pub fn with_format(mut self, format: FxpFormat) -> Self {
        self.format = format;
        self
    }

    /// Same iteration count for every iterative stage.
    pub fn with_iterations(mut self, n: u32) -> Self {
        self.mac_stages = n;
        self.hyp_iterations = n;
        self.div_iterations = n;
        self
    }

    pub fn validate(&self) -> Result<(), RpeError> {
        let bad = |m: &str| Err(RpeError::Config(m.to_string()));
        if !(1..=128).contains(&self.mac_stages) {
            return bad("mac_stages must be in 1..=128");
        }
        if !(1..=128).contains(&self.hyp_iterations) {
            return bad("hyp_iterations must be in 1..=128");
        }
        if !(1..=120).contains(&self.div_iterations) {
            return bad("div_iterations must be in 1..=120");
        }
        if self.softmax_len == 0 {
            return bad("softmax_len must be at least 1");
        }
        Ok(())
    }

    /// Cycles spent after the MAC stream for one activation (all `softmax_len` for softmax).
    pub fn af_cycles(&self) -> u64 {
        let (h, d, m) = (self.hyp_iterations as u64, self.div_iterations as u64, self.mac_stages as u64);
        match self.af {
            AfKind::Relu | AfKind::None => 1,
            AfKind::Tanh | AfKind::Sigmoid => h + d,
            AfKind::Gelu => h + d + 5 * m,
            AfKind::Swish => h + d + m,
            AfKind::Selu => h + 2,
            AfKind::Softmax => self.softmax_len as u64 * (h + d),
        }
    }

    /// Cycles of a MAC stream of `len` products.
    pub fn mac_cycles(&self, len: usize) -> u64 {
        if len == 0 {
            0
        } else {
            len as u64 + self.mac_stages as u64 - 1
        }
    }
}

/// `ceil(log2(n))`, 0 for `n <= 1`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// One linear-CORDIC pass `acc + x*w` over `n` iterations in `fmt`.
#[inline]
pub(crate) fn linear_pass(acc: i64, x: i64, w: i64, n: u32, fmt: FxpFormat) -> (i64, bool) {
    if n <= MAX_ENCODED_ITERATIONS {
        let e = encode_weight(w, n, fmt.frac_bits());
        mac_encoded(acc, x, e, n, fmt.min_raw(), fmt.max_raw())
    } else {
        cordic::mac_raw(acc, x, w, n, fmt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacOutput {
    pub acc: FxpValue,
    pub cycles: u64,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AfOutput {
    pub value: FxpValue,
    pub cycles: u64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftmaxOutput {
    pub probs: Vec<FxpValue>,
    pub cycles: u64,
    pub saturated: bool,
}

/// Exponentials waiting for the division phase, summed as they are stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftmaxFifo {
    entries: Vec<FxpValue>,
    sum: FxpValue,
    saturated: bool,
}

impl SoftmaxFifo {
    /// FIFO for `n` entries of `fmt`; the running sum gets `ceil(log2 n)` guard bits.
    pub fn new(fmt: FxpFormat, n: usize) -> Self {
        Self {
            entries: Vec::with_capacity(n),
            sum: FxpValue::zero(fmt.widened(ceil_log2(n))),
            saturated: false,
        }
    }

    pub fn push(&mut self, v: FxpValue) {
        let (s, f) = FxpValue::from_raw_saturating(self.sum.raw() as i128 + v.raw() as i128, self.sum.format());
        self.sum = s;
        self.saturated |= f;
        self.entries.push(v);
    }

    pub fn entries(&self) -> &[FxpValue] {
        &self.entries
    }

    pub fn running_sum(&self) -> FxpValue {
        self.sum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

const GELU_C: f64 = 0.044_715;
const GELU_S: f64 = 0.797_884_560_8;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// A configured processing element with its constant tables built once.
#[derive(Debug, Clone)]
pub struct Rpe {
    cfg: RpeConfig,
    exp: ExpUnit,
    gelu_c: i64,
    gelu_s: i64,
    selu_l: i64,
    selu_la: i64,
}

impl Rpe {
    pub fn new(cfg: RpeConfig) -> Result<Self, RpeError> {
        cfg.validate()?;
        let f = cfg.format;
        let c = |v: f64| FxpValue::quantize(v, f, RoundingMode::NearestEven).raw();
        Ok(Self {
            cfg,
            exp: ExpUnit::new(f, cfg.hyp_iterations as usize)?,
            gelu_c: c(GELU_C),
            gelu_s: c(GELU_S),
            selu_l: c(SELU_LAMBDA),
            selu_la: c(SELU_LAMBDA * SELU_ALPHA),
        })
    }

    pub fn config(&self) -> &RpeConfig {
        &self.cfg
    }

    fn fmt(&self) -> FxpFormat {
        self.cfg.format
    }

    fn check(&self, v: FxpValue) -> Result<(), RpeError> {
        if v.format() != self.fmt() {
            return Err(FxpError::FormatMismatch(self.fmt(), v.format()).into());
        }
        Ok(())
    }

    /// Left fold of CORDIC products starting from `bias`, in a widened accumulator.
    pub fn mac_stream(&self, inputs: &[FxpValue], weights: &[FxpValue], bias: FxpValue) -> Result<MacOutput, RpeError> {
        if inputs.len() != weights.len() {
            return Err(RpeError::LengthMismatch { inputs: inputs.len(), weights: weights.len() });
        }
        if inputs.is_empty() {
            return Err(RpeError::Empty);
        }
        self.check(bias)?;
        for v in inputs.iter().chain(weights) {
            self.check(*v)?;
        }
        let wide = self.fmt().widened(ceil_log2(inputs.len()));
        let n = self.cfg.mac_stages;
        let mut acc = bias.raw();
        let mut sat = false;
        for (x, w) in inputs.iter().zip(weights) {
            let (a, s) = linear_pass(acc, x.raw(), w.raw(), n, wide);
            acc = a;
            sat |= s;
        }
        let (out, s) = FxpValue::from_raw_saturating(acc as i128, self.fmt());
        Ok(MacOutput { acc: out, cycles: self.cfg.mac_cycles(inputs.len()), saturated: sat | s })
    }

    /// One multiply pass for the activation datapath. The partial sums live in a
    /// double-width register; only the finished product is saturated.
    fn pass(&self, acc: i64, x: i64, w: i64) -> (i64, bool) {
        let f = self.fmt();
        let (v, s) = linear_pass(acc, x, w, self.cfg.mac_stages, f.widened(f.word_bits()));
        let (v, s2) = f.saturate(v as i128);
        (v, s | s2)
    }

    fn divide(&self, num: i128, den: i128) -> (i64, bool) {
        let q = divide_raw(num, den, self.cfg.div_iterations, self.fmt().frac_bits());
        self.fmt().saturate(q)
    }

    /// `tanh` as `sinh / cosh`, with the exponent of an argument reduction folded
    /// into both operands of the division.
    fn tanh_raw(&self, a: i64) -> (i64, bool) {
        let p = self.exp.parts(a);
        let (pl, mi) = (p.plus_mant(), p.minus_mant());
        let (num, den) = if p.k == 0 {
            (p.sinh, p.cosh)
        } else {
            // tanh = (2^k P - 2^-k M) / (2^k P + 2^-k M), scaled by 2^|k|
            let room = 124 - (128 - pl.unsigned_abs().max(mi.unsigned_abs()).leading_zeros());
            let t = (2 * p.k.unsigned_abs()).min(room);
            if p.k > 0 {
                ((pl << t) - mi, (pl << t) + mi)
            } else {
                (pl - (mi << t), pl + (mi << t))
            }
        };
        if den <= 0 {
            return (0, true);
        }
        let (q, s) = self.divide(num, den);
        (q, s | p.saturated)
    }

    /// `1 / (1 + e^-a)`: exponential, add one, divide.
    fn sigmoid_raw(&self, a: i64) -> (i64, bool) {
        let p = self.exp.parts(a);
        let one = (self.fmt().one_raw() as i128) << p.guard;
        let m = p.minus_mant();
        // e^-a = 2^-k * m
        let room = 124 - (128 - one.unsigned_abs().max(m.unsigned_abs()).leading_zeros());
        let t = p.k.unsigned_abs().min(room);
        let (num, den) = if p.k >= 0 { (one << t, (one << t) + m) } else { (one, one + (m << t)) };
        if den <= 0 {
            return (self.fmt().max_raw(), true);
        }
        let (q, s) = self.divide(num, den);
        (q, s | p.saturated)
    }

    /// Truncating multiply by a stored constant.
    fn const_mul(&self, x: i64, c: i64) -> (i64, bool) {
        self.fmt().saturate((x as i128 * c as i128) >> self.fmt().frac_bits())
    }

    /// Apply the configured scalar activation to an accumulator value.
    pub fn activate(&self, acc: FxpValue) -> Result<AfOutput, RpeError> {
        self.check(acc)?;
        let f = self.fmt();
        let x = acc.raw();
        let one = f.one_raw();
        let (v, sat) = match self.cfg.af {
            AfKind::Relu => (x.max(0), false),
            AfKind::None => (x, false),
            AfKind::Tanh => self.tanh_raw(x),
            AfKind::Sigmoid => self.sigmoid_raw(x),
            AfKind::Gelu => {
                let (x2, s1) = self.pass(0, x, x);
                let (x3, s2) = self.pass(0, x2, x);
                let (u, s3) = self.pass(x, x3, self.gelu_c);
                let (v, s4) = self.pass(0, u, self.gelu_s);
                let (t, s5) = self.tanh_raw(v);
                let h = (one + t) >> 1;
                let (out, s6) = self.pass(0, x, h);
                (out, s1 | s2 | s3 | s4 | s5 | s6)
            }
            AfKind::Swish => {
                let (s, s1) = self.sigmoid_raw(x);
                let (out, s2) = self.pass(0, x, s);
                (out, s1 | s2)
            }
            AfKind::Selu => {
                if x > 0 {
                    self.const_mul(x, self.selu_l)
                } else {
                    let (e, s1) = self.exp.exp(acc, ExpSign::Plus);
                    let (em1, s2) = f.saturate(e.raw() as i128 - one as i128);
                    let (out, s3) = self.const_mul(em1, self.selu_la);
                    (out, s1 | s2 | s3)
                }
            }
            AfKind::Softmax => {
                return Err(RpeError::Config("softmax is a vector operation; use softmax()".into()));
            }
        };
        Ok(AfOutput { value: FxpValue::from_raw(v, f)?, cycles: self.cfg.af_cycles(), saturated: sat })
    }

    /// Softmax over `vec`: max subtraction, one exponential per element into the
    /// FIFO, then one division per element by the running sum.
    pub fn softmax(&self, vec: &[FxpValue]) -> Result<SoftmaxOutput, RpeError> {
        if vec.is_empty() {
            return Err(RpeError::Empty);
        }
        for v in vec {
            self.check(*v)?;
        }
        let f = self.fmt();
        let max = vec.iter().map(|v| v.raw()).max().unwrap_or(0);
        let mut fifo = SoftmaxFifo::new(f, vec.len());
        let mut sat = false;
        for v in vec {
            let (d, s1) = FxpValue::from_raw_saturating(v.raw() as i128 - max as i128, f);
            let (e, s2) = self.exp.exp(d, ExpSign::Plus);
            sat |= s1 | s2;
            fifo.push(e);
        }
        let sum = fifo.running_sum().raw();
        if sum == 0 {
            let underflowed = fifo.entries().iter().enumerate().filter(|(_, e)| e.raw() == 0).map(|(i, _)| i).collect();
            return Err(RpeError::DegenerateSoftmax { underflowed });
        }
        let mut probs = Vec::with_capacity(vec.len());
        for e in fifo.entries() {
            let (q, s) = self.divide(e.raw() as i128, sum as i128);
            sat |= s;
            probs.push(FxpValue::from_raw(q, f)?);
        }
        let (h, d) = (self.cfg.hyp_iterations as u64, self.cfg.div_iterations as u64);
        Ok(SoftmaxOutput { probs, cycles: vec.len() as u64 * (h + d), saturated: sat | fifo.saturated })
    }

    /// Run a complete neuron program and record its FSM trace.
    pub fn run_program(&self, prog: &RpeProgram) -> Result<(Vec<FxpValue>, RpeTrace), RpeError> {
        prog.validate(&self.cfg)?;
        let mut accs = Vec::with_capacity(prog.rows.len());
        for (row, b) in prog.rows.iter().zip(&prog.biases) {
            accs.push(self.mac_stream(&prog.inputs, row, *b)?.acc);
        }
        let out = if self.cfg.af == AfKind::Softmax {
            self.softmax(&accs)?.probs
        } else {
            vec![self.activate(accs[0])?.value]
        };
        Ok((out, RpeTrace::for_program(&self.cfg, prog.inputs.len())))
    }
}

/// `mac_stream` with a freshly built element.
pub fn mac_stream(inputs: &[FxpValue], weights: &[FxpValue], bias: FxpValue, cfg: &RpeConfig) -> Result<MacOutput, RpeError> {
    Rpe::new(*cfg)?.mac_stream(inputs, weights, bias)
}

/// `activate` with a freshly built element.
pub fn activate(acc: FxpValue, cfg: &RpeConfig) -> Result<AfOutput, RpeError> {
    Rpe::new(*cfg)?.activate(acc)
}

/// `softmax` with a freshly built element.
pub fn softmax(vec: &[FxpValue], cfg: &RpeConfig) -> Result<SoftmaxOutput, RpeError> {
    Rpe::new(*cfg)?.softmax(vec)
}

/// `run_program` with a freshly built element.
pub fn run_program(prog: &RpeProgram, cfg: &RpeConfig) -> Result<(Vec<FxpValue>, RpeTrace), RpeError> {
    Rpe::new(*cfg)?.run_program(prog)
}

/// One neuron (or one softmax group): shared inputs, one weight row and bias per output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpeProgram {
    pub inputs: Vec<FxpValue>,
    pub rows: Vec<Vec<FxpValue>>,
    pub biases: Vec<FxpValue>,
}

impl RpeProgram {
    pub fn neuron(inputs: Vec<FxpValue>, weights: Vec<FxpValue>, bias: FxpValue) -> Self {
        Self { inputs, rows: vec![weights], biases: vec![bias] }
    }

    pub fn validate(&self, cfg: &RpeConfig) -> Result<(), RpeError> {
        if self.inputs.is_empty() || self.rows.is_empty() {
            return Err(RpeError::Empty);
        }
        if self.rows.len() != self.biases.len() {
            return Err(RpeError::Config("one bias per weight row".into()));
        }
        let want = if cfg.af == AfKind::Softmax { cfg.softmax_len } else { 1 };
        if self.rows.len() != want {
            return Err(RpeError::Config(format!("{} needs {want} weight rows, got {}", cfg.af, self.rows.len())));
        }
        for r in &self.rows {
            if r.len() != self.inputs.len() {
                return Err(RpeError::LengthMismatch { inputs: self.inputs.len(), weights: r.len() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RpeFsmState {
    Idle,
    Init,
    MacStream,
    Hyp,
    Div,
    SoftmaxDiv,
    Relu,
    Done,
}

impl RpeFsmState {
    pub fn name(self) -> &'static str {
        match self {
            RpeFsmState::Idle => "IDLE",
            RpeFsmState::Init => "INIT",
            RpeFsmState::MacStream => "MAC_STREAM",
            RpeFsmState::Hyp => "HYP",
            RpeFsmState::Div => "DIV",
            RpeFsmState::SoftmaxDiv => "SOFTMAX_DIV",
            RpeFsmState::Relu => "RELU",
            RpeFsmState::Done => "DONE",
        }
    }

    /// Whether the FSM may move from `self` to `next` on a clock edge.
    /// Staying put is always allowed except in the single-cycle states.
    pub fn can_go_to(self, next: RpeFsmState) -> bool {
        use RpeFsmState::*;
        if self == next {
            return matches!(self, Idle | MacStream | Hyp | Div | SoftmaxDiv);
        }
        matches!(
            (self, next),
            (Idle, Init)
                | (Init, MacStream)
                | (MacStream, Hyp)
                | (MacStream, Relu)
                | (Hyp, Div)
                | (Hyp, SoftmaxDiv)
                | (Div, Done)
                | (SoftmaxDiv, Done)
                | (Relu, Done)
                | (Done, Idle)
        )
    }
}

impl fmt::Display for RpeFsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Control signals driven in one cycle.
///
/// `sel_all` encodes the activation family: 0 relu/none, 1 tanh/gelu,
/// 2 sigmoid/swish/selu, 3 softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Signals {
    pub hyp_select: bool,
    pub div_select: bool,
    pub sel_sig_sof: bool,
    pub sel_tan: bool,
    pub relu_other: bool,
    pub sel_all: u8,
    pub rpe_done: bool,
}

impl Signals {
    /// Fixed-order bit string: hyp_select, div_select, sel_sig_sof, sel_tan,
    /// relu_other, sel_all[1], sel_all[0], rpe_done.
    pub fn bits(&self) -> String {
        [
            self.hyp_select,
            self.div_select,
            self.sel_sig_sof,
            self.sel_tan,
            self.relu_other,
            self.sel_all & 2 != 0,
            self.sel_all & 1 != 0,
            self.rpe_done,
        ]
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect()
    }

    fn for_af(af: AfKind) -> Self {
        let (sig, tan, relu, all) = match af {
            AfKind::Relu | AfKind::None => (false, false, true, 0),
            AfKind::Tanh | AfKind::Gelu => (false, true, false, 1),
            AfKind::Sigmoid | AfKind::Swish => (true, false, false, 2),
            AfKind::Selu => (false, false, false, 2),
            AfKind::Softmax => (true, false, false, 3),
        };
        Signals { sel_sig_sof: sig, sel_tan: tan, relu_other: relu, sel_all: all, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub state: RpeFsmState,
    pub signals: Signals,
    /// Position inside the current state (MAC issue slot, iteration, element).
    pub counter: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("trace must start in IDLE")]
    BadStart,
    #[error("cycle {cycle} does not follow {prev}")]
    Cycle { prev: u64, cycle: u64 },
    #[error("illegal transition {from} -> {to} at cycle {cycle}")]
    Transition { from: RpeFsmState, to: RpeFsmState, cycle: u64 },
    #[error("expected exactly one RPE_done, found {0}")]
    DoneCount(usize),
    #[error("RPE_done raised outside DONE at cycle {0}")]
    DoneOutsideDone(u64),
    #[error("trace ends in {0} instead of DONE")]
    BadEnd(RpeFsmState),
}

/// Cycle-stamped FSM record of one program.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RpeTrace {
    pub records: Vec<TraceRecord>,
}

impl RpeTrace {
    /// The trace of a program; it depends only on the configuration and the
    /// number of products per output.
    pub fn for_program(cfg: &RpeConfig, len: usize) -> Self {
        let mut t = RpeTrace::default();
        let sel = Signals::for_af(cfg.af);
        let rows = if cfg.af == AfKind::Softmax { cfg.softmax_len } else { 1 };
        let (h, d, m) = (cfg.hyp_iterations as u64, cfg.div_iterations as u64, cfg.mac_stages as u64);
        t.push(RpeFsmState::Idle, Signals::default(), 1);
        t.push(RpeFsmState::Init, sel, 1);
        t.push(RpeFsmState::MacStream, sel, cfg.mac_cycles(len * rows));
        let hyp = Signals { hyp_select: true, ..sel };
        let div = Signals { div_select: true, ..sel };
        match cfg.af {
            AfKind::Relu | AfKind::None => t.push(RpeFsmState::Relu, sel, 1),
            AfKind::Tanh | AfKind::Sigmoid => {
                t.push(RpeFsmState::Hyp, hyp, h);
                t.push(RpeFsmState::Div, div, d);
            }
            // the polynomial passes run before the hyperbolic stage, the final product after the divide
            AfKind::Gelu => {
                t.push(RpeFsmState::Hyp, hyp, 4 * m + h);
                t.push(RpeFsmState::Div, div, d + m);
            }
            AfKind::Swish => {
                t.push(RpeFsmState::Hyp, hyp, h);
                t.push(RpeFsmState::Div, div, d + m);
            }
            // subtract-one and the constant multiply sit in the post-stage
            AfKind::Selu => {
                t.push(RpeFsmState::Hyp, hyp, h);
                t.push(RpeFsmState::Div, div, 2);
            }
            AfKind::Softmax => {
                t.push(RpeFsmState::Hyp, hyp, rows as u64 * h);
                t.push(RpeFsmState::SoftmaxDiv, div, rows as u64 * d);
            }
        }
        t.push(RpeFsmState::Done, Signals { rpe_done: true, ..sel }, 1);
        t
    }

    fn push(&mut self, state: RpeFsmState, signals: Signals, n: u64) {
        let start = self.records.last().map_or(0, |r| r.cycle + 1);
        for c in 0..n {
            self.records.push(TraceRecord { cycle: start + c, state, signals, counter: c as u32 });
        }
    }

    pub fn count(&self, state: RpeFsmState) -> u64 {
        self.records.iter().filter(|r| r.state == state).count() as u64
    }

    /// Cycles doing work: everything except IDLE, INIT and DONE.
    pub fn compute_cycles(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| !matches!(r.state, RpeFsmState::Idle | RpeFsmState::Init | RpeFsmState::Done))
            .count() as u64
    }

    /// Cycles from the first MAC issue until RPE_done is raised.
    pub fn first_output_latency(&self) -> Option<u64> {
        let start = self.records.iter().find(|r| r.state == RpeFsmState::MacStream)?.cycle;
        let done = self.records.iter().find(|r| r.signals.rpe_done)?.cycle;
        Some(done - start)
    }

    /// Check cycle order, the transition relation and the done signal.
    pub fn validate(&self) -> Result<(), TraceError> {
        let first = self.records.first().ok_or(TraceError::Empty)?;
        if first.state != RpeFsmState::Idle {
            return Err(TraceError::BadStart);
        }
        let mut dones = 0;
        for w in self.records.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.cycle != a.cycle + 1 {
                return Err(TraceError::Cycle { prev: a.cycle, cycle: b.cycle });
            }
            if !a.state.can_go_to(b.state) {
                return Err(TraceError::Transition { from: a.state, to: b.state, cycle: b.cycle });
            }
        }
        for r in &self.records {
            if r.signals.rpe_done {
                dones += 1;
                if r.state != RpeFsmState::Done {
                    return Err(TraceError::DoneOutsideDone(r.cycle));
                }
            }
        }
        if dones != 1 {
            return Err(TraceError::DoneCount(dones));
        }
        let last = self.records.last().map(|r| r.state).unwrap_or(RpeFsmState::Idle);
        if last != RpeFsmState::Done {
            return Err(TraceError::BadEnd(last));
        }
        Ok(())
    }

    /// `cycle,state,bits` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.cycle, r.state, r.signals.bits()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: f64, f: FxpFormat) -> FxpValue {
        FxpValue::quantize(v, f, RoundingMode::Truncate)
    }

    #[test]
    fn nine_products_take_thirteen_cycles() {
        let cfg = RpeConfig::default();
        let f = cfg.format;
        let xs = vec![q(0.5, f); 9];
        let ws = vec![q(0.25, f); 9];
        let out = mac_stream(&xs, &ws, q(0.0, f), &cfg).unwrap();
        assert_eq!(out.cycles, 13);
    }

    #[test]
    fn zero_weights_keep_bias() {
        let cfg = RpeConfig::default();
        let f = cfg.format;
        let xs: Vec<_> = (0..9).map(|i| q(i as f64 * 0.7 - 3.0, f)).collect();
        let out = mac_stream(&xs, &vec![q(0.0, f); 9], q(1.25, f), &cfg).unwrap();
        assert_eq!(out.acc, q(1.25, f));
    }

    #[test]
    fn af_cycle_counts() {
        let c = RpeConfig::default();
        assert_eq!(c.with_af(AfKind::Relu).af_cycles(), 1);
        assert_eq!(c.with_af(AfKind::Tanh).af_cycles(), 9);
        assert_eq!(c.with_af(AfKind::Sigmoid).af_cycles(), 9);
        assert_eq!(c.with_af(AfKind::Selu).af_cycles(), 7);
        assert_eq!(c.with_af(AfKind::Gelu).af_cycles(), 34);
        assert_eq!(c.with_af(AfKind::Swish).af_cycles(), 14);
    }

    #[test]
    fn origin_values() {
        let c = RpeConfig::default();
        let f = c.format;
        let t = activate(q(0.0, f), &c.with_af(AfKind::Tanh)).unwrap();
        assert!(t.value.to_real().abs() <= f.ulp());
        assert_eq!(t.cycles, 9);
        let s = activate(q(0.0, f), &c.with_af(AfKind::Sigmoid)).unwrap();
        assert!((s.value.to_real() - 0.5).abs() <= 2.0 * f.ulp());
        let r = activate(q(-1.0, f), &c.with_af(AfKind::Relu)).unwrap();
        assert_eq!(r.value.raw(), 0);
        assert_eq!(r.cycles, 1);
    }

    #[test]
    fn trace_shapes() {
        let c = RpeConfig::default();
        let t = RpeTrace::for_program(&c, 9);
        t.validate().unwrap();
        assert_eq!(t.compute_cycles(), 14);
        let t = RpeTrace::for_program(&c.with_af(AfKind::Tanh), 9);
        assert_eq!(t.compute_cycles(), 22);
        let sm = RpeConfig { af: AfKind::Softmax, softmax_len: 10, ..c };
        let t = RpeTrace::for_program(&sm, 9);
        t.validate().unwrap();
        assert_eq!(t.count(RpeFsmState::Hyp), 50);
        assert_eq!(t.count(RpeFsmState::SoftmaxDiv), 40);
        assert!(t.to_text().starts_with("0,IDLE,00000000\n1,INIT,"));
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(0), 0);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(9), 4);
        assert_eq!(ceil_log2(16), 4);
    }
}
