//! Output-stationary systolic array model and layer scheduler.
//!
//! Every RPE owns one output value and streams the products for it. A layer is
//! split into passes; in one pass each active RPE computes one output, so a pass
//! takes as many cycles as there are (unpruned) products per output.
//!
//! Convolutions whose output map fits the array are replicated: one copy of the
//! output map per group of sub-blocks, `copies = min(Cout, n_sub / ceil(HW / sub_area))`,
//! each copy working on a different output channel. Larger maps are cut into
//! row strips of at most `rows * cols` pixels. Fully connected layers put one
//! output neuron on each RPE.
//!
//! Conv utilization is the share of the array holding an output. A fully
//! connected layer with fewer outputs than RPEs powers only the smallest square
//! block of sub-blocks (a power-of-four count) that holds them, and its
//! utilization is measured against that block.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rpe::{AfKind, RpeConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SycoreError {
    #[error("invalid array: {0}")]
    Array(String),
    #[error("invalid layer `{layer}`: {msg}")]
    Layer { layer: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid pruning spec `{0}` (use A:B or P%)")]
    Pruning(String),
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer `{layer}` needs {events} simulation events, over the budget of {budget}")]
    TooLarge { layer: String, events: u64, budget: u64 },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub subblock_rows: usize,
    pub subblock_cols: usize,
    pub rpe_config: RpeConfig,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self { rows: 32, cols: 32, subblock_rows: 4, subblock_cols: 4, rpe_config: RpeConfig::default() }
    }
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize, sub_rows: usize, sub_cols: usize) -> Result<Self, SycoreError> {
        let a = Self { rows, cols, subblock_rows: sub_rows, subblock_cols: sub_cols, ..Default::default() };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), SycoreError> {
        if self.rows == 0 || self.cols == 0 || self.subblock_rows == 0 || self.subblock_cols == 0 {
            return Err(SycoreError::Array("dimensions must be positive".into()));
        }
        if self.rows % self.subblock_rows != 0 || self.cols % self.subblock_cols != 0 {
            return Err(SycoreError::Array(format!(
                "{}x{} is not divisible into {}x{} sub-blocks",
                self.rows, self.cols, self.subblock_rows, self.subblock_cols
            )));
        }
        Ok(())
    }

    pub fn rpes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn subblock_area(&self) -> usize {
        self.subblock_rows * self.subblock_cols
    }

    pub fn subblocks(&self) -> usize {
        self.rpes() / self.subblock_area()
    }

    /// Sub-blocks in the smallest power-of-four block holding `n` sub-blocks, capped at the array.
    fn region_subblocks(&self, n: usize) -> usize {
        let mut r = 1;
        while r < n {
            r *= 4;
        }
        r.min(self.subblocks())
    }
}

/// Parse `RxC`, e.g. `32x32`.
pub fn parse_dims(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.trim().split_once(['x', 'X'])?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Pool => "pool",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn on_array(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv" => Ok(LayerKind::Conv),
            "fc" => Ok(LayerKind::Fc),
            "pool" => Ok(LayerKind::Pool),
            "flatten" => Ok(LayerKind::Flatten),
            _ => Err(format!("unknown layer kind `{s}`")),
        }
    }
}

/// One layer. `h`/`w` are the input spatial dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    #[serde(default = "one")]
    pub h: usize,
    #[serde(default = "one")]
    pub w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "no_af")]
    pub af: AfKind,
}

fn one() -> usize {
    1
}

fn no_af() -> AfKind {
    AfKind::None
}

impl LayerSpec {
    pub fn conv(name: &str, k: usize, cin: usize, cout: usize, h: usize, w: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Conv, k, cin, cout, h, w, stride: 1, pad: 0, af: AfKind::Relu }
    }

    pub fn fc(name: &str, cin: usize, cout: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Fc, k: 1, cin, cout, h: 1, w: 1, stride: 1, pad: 0, af: AfKind::Relu }
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn validate(&self) -> Result<(), SycoreError> {
        let err = |m: &str| Err(SycoreError::Layer { layer: self.name.clone(), msg: m.into() });
        match self.kind {
            LayerKind::Conv | LayerKind::Pool => {
                if self.k == 0 || self.cin == 0 || self.cout == 0 || self.h == 0 || self.w == 0 || self.stride == 0 {
                    return err("k, cin, cout, h, w and stride must be at least 1");
                }
                if self.h + 2 * self.pad < self.k || self.w + 2 * self.pad < self.k {
                    return err("kernel larger than the padded input");
                }
                if self.kind == LayerKind::Pool && self.cin != self.cout {
                    return err("pooling keeps the channel count");
                }
            }
            LayerKind::Fc | LayerKind::Flatten => {
                if self.cin == 0 || self.cout == 0 {
                    return err("cin and cout must be at least 1");
                }
            }
        }
        Ok(())
    }

    /// Output spatial dimensions.
    pub fn out_dims(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv | LayerKind::Pool => (
                (self.h + 2 * self.pad - self.k) / self.stride + 1,
                (self.w + 2 * self.pad - self.k) / self.stride + 1,
            ),
            LayerKind::Fc | LayerKind::Flatten => (1, 1),
        }
    }

    /// Output values per channel.
    pub fn pixels(&self) -> usize {
        let (a, b) = self.out_dims();
        a * b
    }

    /// Products per output value.
    pub fn products_per_output(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => (self.k * self.k * self.cin) as u64,
            LayerKind::Fc => self.cin as u64,
            _ => 0,
        }
    }

    /// Exact MAC count of the layer.
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => self.products_per_output() * (self.cout * self.pixels()) as u64,
            LayerKind::Fc => (self.cin * self.cout) as u64,
            _ => 0,
        }
    }

    /// `(KxK)xCinxCoutx(HxW)` or `CinxCout`.
    pub fn describe(&self) -> String {
        match self.kind {
            LayerKind::Conv => format!("({k}x{k})x{}x{}x({}x{})", self.cin, self.cout, self.h, self.w, k = self.k),
            LayerKind::Pool => format!("pool {k}x{k}/{} x{}x({}x{})", self.stride, self.cin, self.h, self.w, k = self.k),
            LayerKind::Fc => format!("{}x{}", self.cin, self.cout),
            LayerKind::Flatten => format!("flatten {}", self.cout),
        }
    }
}

/// Fraction of weights removed, kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningSpec {
    pub num: u64,
    pub den: u64,
}

impl PruningSpec {
    pub fn ratio(num: u64, den: u64) -> Result<Self, SycoreError> {
        if den == 0 || num >= den {
            return Err(SycoreError::Pruning(format!("{num}:{den}")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn fraction(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Products kept out of `n` after pruning.
    pub fn kept(&self, n: u64) -> u64 {
        n - (n as u128 * self.num as u128 / self.den as u128) as u64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl FromStr for PruningSpec {
    type Err = SycoreError;

    /// `A:B` (A of every B weights removed), `P%` or a fraction like `0.4`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SycoreError::Pruning(s.to_string());
        let t = s.trim();
        if let Some((a, b)) = t.split_once(':') {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            return PruningSpec::ratio(a, b).map_err(|_| bad());
        }
        let (digits, scale) = match t.strip_suffix('%') {
            Some(p) => (p.trim(), 100u64),
            None => (t, 1),
        };
        // decimal string to an exact ratio
        let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 9 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32) * scale;
        let num: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        PruningSpec::ratio(num, den).map_err(|_| bad())
    }
}

impl fmt::Display for PruningSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.num, self.den)
    }
}

/// A group of outputs computed together: `active` RPEs, `rounds` times, each round
/// streaming `products` products per RPE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassGroup {
    pub active: usize,
    pub rounds: u64,
    pub products: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub layer: String,
    pub kind: LayerKind,
    pub spec: String,
    /// Output map per copy for conv, powered region for fc.
    pub mapped_grid: (usize, usize),
    pub active_rpes: usize,
    /// Products per output channel group: `K*K*Cin*Cout` for conv, `Cout` for fc.
    pub kmac_ops: u64,
    /// Exact MAC count before pruning.
    pub macs: u64,
    /// MACs left after pruning.
    pub scheduled_macs: u64,
    pub op_cycles: u64,
    pub utilization_pct: f64,
    pub parallel_copies: usize,
    pub pruned_fraction: f64,
    /// Row strips the output map was cut into (1 when it fits).
    pub tiles: usize,
    /// Pool/flatten layers run on the host and take no array cycles.
    pub host: bool,
    pub passes: Vec<PassGroup>,
}

/// Map one layer onto the array.
pub fn map_layer(layer: &LayerSpec, array: &ArrayConfig) -> Result<ScheduleEntry, SycoreError> {
    map_layer_pruned(layer, array, None)
}

/// [`map_layer`] with the per-output product count reduced by `pruning`.
pub fn map_layer_pruned(
    layer: &LayerSpec,
    array: &ArrayConfig,
    pruning: Option<PruningSpec>,
) -> Result<ScheduleEntry, SycoreError> {
    array.validate()?;
    layer.validate()?;
    let mut e = ScheduleEntry {
        layer: layer.name.clone(),
        kind: layer.kind,
        spec: layer.describe(),
        mapped_grid: (0, 0),
        active_rpes: 0,
        kmac_ops: 0,
        macs: layer.macs(),
        scheduled_macs: 0,
        op_cycles: 0,
        utilization_pct: 0.0,
        parallel_copies: 0,
        pruned_fraction: pruning.map_or(0.0, |p| p.fraction()),
        tiles: 0,
        host: !layer.kind.on_array(),
        passes: Vec::new(),
    };
    if e.host {
        return Ok(e);
    }
    let per_out = layer.products_per_output();
    let kept = pruning.map_or(per_out, |p| p.kept(per_out));
    let n = array.rpes();
    let sa = array.subblock_area();
    let active;
    match layer.kind {
        LayerKind::Conv => {
            let px = layer.pixels();
            let cout = layer.cout;
            e.kmac_ops = per_out * cout as u64;
            if px <= n {
                let subs_per_copy = px.div_ceil(sa);
                let copies = (array.subblocks() / subs_per_copy).clamp(1, cout);
                let full = cout / copies;
                let rest = cout % copies;
                e.passes.push(PassGroup { active: px * copies, rounds: full as u64, products: kept });
                if rest > 0 {
                    e.passes.push(PassGroup { active: px * rest, rounds: 1, products: kept });
                }
                e.parallel_copies = copies;
                e.tiles = 1;
                active = px * copies;
            } else {
                let tiles = px.div_ceil(n);
                let last = px - (tiles - 1) * n;
                e.passes.push(PassGroup { active: n, rounds: ((tiles - 1) * cout) as u64, products: kept });
                e.passes.push(PassGroup { active: last, rounds: cout as u64, products: kept });
                e.passes.retain(|p| p.rounds > 0);
                e.parallel_copies = 1;
                e.tiles = tiles;
                // share of the powered array doing work, averaged over the strips
                active = px.div_ceil(tiles);
            }
        }
        LayerKind::Fc => {
            let cout = layer.cout;
            e.kmac_ops = cout as u64;
            let full = cout / n;
            let rest = cout % n;
            if full > 0 {
                e.passes.push(PassGroup { active: n, rounds: full as u64, products: kept });
            }
            if rest > 0 {
                e.passes.push(PassGroup { active: rest, rounds: 1, products: kept });
            }
            e.parallel_copies = 1;
            e.tiles = cout.div_ceil(n);
            active = if full > 0 { cout.div_ceil(e.tiles) } else { cout };
        }
        _ => unreachable!(),
    }
    let region_rpes = match layer.kind {
        LayerKind::Fc => array.region_subblocks(layer.cout.min(n).div_ceil(sa)) * sa,
        _ => n,
    };
    e.mapped_grid = match layer.kind {
        LayerKind::Fc => {
            let side = (region_rpes / sa).isqrt();
            if side * side * sa == region_rpes {
                (side * array.subblock_rows, side * array.subblock_cols)
            } else {
                (array.rows, array.cols)
            }
        }
        _ => {
            let (oh, ow) = layer.out_dims();
            if e.tiles > 1 {
                (array.rows, array.cols)
            } else {
                (oh, ow)
            }
        }
    };
    e.active_rpes = active.min(region_rpes);
    e.utilization_pct = 100.0 * e.active_rpes as f64 / region_rpes as f64;
    e.op_cycles = e.passes.iter().map(|p| p.rounds * p.products).sum();
    e.scheduled_macs = e.passes.iter().map(|p| p.active as u64 * p.rounds * p.products).sum();
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub array: ArrayConfig,
    pub pruning: Option<PruningSpec>,
    pub entries: Vec<ScheduleEntry>,
    pub total_op_cycles: u64,
    pub total_macs: u64,
    pub total_scheduled_macs: u64,
    /// Per-layer utilization weighted by each layer's MAC count.
    pub utilization_mac_weighted: f64,
    /// Plain average of the per-layer utilizations.
    pub utilization_mean: f64,
    pub mapping_rule: String,
}

pub const MAPPING_RULE: &str = "conv: copies = min(Cout, n_sub / ceil(HW / sub_area)), op_cycles = K*K*Cin*ceil(Cout/copies); \
row strips when HW > rows*cols; fc: op_cycles = Cin*ceil(Cout/(rows*cols)); \
conv utilization = HW*copies/(rows*cols); fc utilization = outputs / smallest power-of-four block of sub-blocks holding them";

pub fn schedule_network(
    layers: &[LayerSpec],
    array: &ArrayConfig,
    pruning: Option<PruningSpec>,
) -> Result<ScheduleReport, SycoreError> {
    if layers.is_empty() {
        return Err(SycoreError::EmptyNetwork);
    }
    let pruning = pruning.filter(|p| p.num > 0);
    let entries = layers.iter().map(|l| map_layer_pruned(l, array, pruning)).collect::<Result<Vec<_>, _>>()?;
    let on: Vec<&ScheduleEntry> = entries.iter().filter(|e| !e.host).collect();
    let total_macs: u64 = on.iter().map(|e| e.macs).sum();
    let weighted = if total_macs > 0 {
        on.iter().map(|e| e.utilization_pct * e.macs as f64).sum::<f64>() / total_macs as f64
    } else {
        0.0
    };
    let mean = if on.is_empty() { 0.0 } else { on.iter().map(|e| e.utilization_pct).sum::<f64>() / on.len() as f64 };
    Ok(ScheduleReport {
        array: *array,
        pruning,
        total_op_cycles: on.iter().map(|e| e.op_cycles).sum(),
        total_macs,
        total_scheduled_macs: on.iter().map(|e| e.scheduled_macs).sum(),
        utilization_mac_weighted: weighted,
        utilization_mean: mean,
        mapping_rule: MAPPING_RULE.to_string(),
        entries,
    })
}

impl ScheduleReport {
    pub const CSV_HEADER: &'static str =
        "layer,kind,spec,mapped_grid,active_rpes,kmac_ops,op_cycles,utilization_pct,parallel_copies,pruned_fraction";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            if e.host {
                s.push_str(&format!("{},{},\"{}\",host,0,0,0,,0,0\n", e.layer, e.kind.name(), e.spec));
            } else {
                s.push_str(&format!(
                    "{},{},\"{}\",{}x{},{},{},{},{:.2},{},{:.6}\n",
                    e.layer,
                    e.kind.name(),
                    e.spec,
                    e.mapped_grid.0,
                    e.mapped_grid.1,
                    e.active_rpes,
                    e.kmac_ops,
                    e.op_cycles,
                    e.utilization_pct,
                    e.parallel_copies,
                    e.pruned_fraction
                ));
            }
        }
        s.push_str(&format!(
            "total,,,,,{},{},{:.2},,\n",
            self.total_scheduled_macs, self.total_op_cycles, self.utilization_mean
        ));
        s
    }
}

/// Parse a network description.
///
/// One layer per line: `NAME KIND key=value ...` with keys `k cin cout h w stride pad af`.
/// `#` starts a comment. Pool and flatten layers may omit what they do not use.
pub fn parse_network(text: &str) -> Result<Vec<LayerSpec>, SycoreError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SycoreError::Parse { line: i + 1, msg };
        let mut tok = line.split_whitespace();
        let name = tok.next().ok_or_else(|| err("missing layer name".into()))?.to_string();
        let kind: LayerKind = tok.next().ok_or_else(|| err("missing layer kind".into()))?.parse().map_err(err)?;
        let mut l = LayerSpec {
            name,
            kind,
            k: 1,
            cin: 0,
            cout: 0,
            h: 1,
            w: 1,
            stride: 1,
            pad: 0,
            af: if kind.on_array() { AfKind::Relu } else { AfKind::None },
        };
        for t in tok {
            let (key, val) = t.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{t}`")))?;
            if key == "af" {
                l.af = val.parse().map_err(|_| err(format!("unknown activation `{val}`")))?;
                continue;
            }
            let v: usize = val.parse().map_err(|_| err(format!("`{key}` needs a non-negative integer, got `{val}`")))?;
            match key {
                "k" => l.k = v,
                "cin" => l.cin = v,
                "cout" => l.cout = v,
                "h" => l.h = v,
                "w" => l.w = v,
                "stride" => l.stride = v,
                "pad" => l.pad = v,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        if l.kind == LayerKind::Pool && l.cout == 0 {
            l.cout = l.cin;
        }
        if l.kind == LayerKind::Flatten && l.cout == 0 {
            l.cout = l.cin * l.h * l.w;
        }
        l.validate().map_err(|e| err(e.to_string()))?;
        out.push(l);
    }
    if out.is_empty() {
        return Err(SycoreError::EmptyNetwork);
    }
    Ok(out)
}

pub fn load_network(path: &Path) -> Result<Vec<LayerSpec>, SycoreError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SycoreError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    parse_network(&text)
}

/// Outcome of the event-driven run of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub measured_cycles: u64,
    pub analytic_cycles: u64,
    /// RPEs with a product in flight, per cycle.
    pub active_histogram: Vec<u32>,
    /// Products issued in each sub-block.
    pub subblock_events: Vec<u64>,
    pub products: u64,
}

/// Simulation budget in issued products.
pub const SIM_EVENT_BUDGET: u64 = 10_000_000;

/// Event-driven run of one layer. Each round of a pass starts when the previous
/// round has issued its last product; inside a round every active RPE issues one
/// product per cycle into its `mac_stages`-deep pipeline.
pub fn simulate_cycles(layer: &LayerSpec, array: &ArrayConfig) -> Result<SimResult, SycoreError> {
    let e = map_layer(layer, array)?;
    let fill = array.rpe_config.mac_stages.max(1) as u64 - 1;
    let products = e.scheduled_macs;
    if products > SIM_EVENT_BUDGET {
        return Err(SycoreError::TooLarge { layer: layer.name.clone(), events: products, budget: SIM_EVENT_BUDGET });
    }
    let sa = array.subblock_area();
    let n = array.rpes();
    let mut subblock_events = vec![0u64; array.subblocks()];
    if e.host {
        return Ok(SimResult { measured_cycles: 0, analytic_cycles: 0, active_histogram: vec![], subblock_events, products: 0 });
    }
    let px = layer.pixels();
    let replicated = layer.kind == LayerKind::Conv && px <= n;
    let subs_per_copy = px.div_ceil(sa);
    // (issue cycle, rpe, products left in the current output)
    let mut heap: BinaryHeap<Reverse<(u64, usize, u64)>> = BinaryHeap::new();
    let mut t0 = 0u64;
    for p in &e.passes {
        for _ in 0..p.rounds {
            for a in 0..p.active {
                let rpe = if replicated {
                    let (copy, pix) = (a / px, a % px);
                    (copy * subs_per_copy + pix / sa) * sa + pix % sa
                } else {
                    a
                };
                if p.products > 0 {
                    heap.push(Reverse((t0, rpe, p.products)));
                }
            }
            t0 += p.products;
        }
    }
    // busy intervals as a difference array; an RPE is busy from an issue until that product retires
    let mut diff: Vec<i64> = vec![0; (t0 + fill + 2) as usize];
    let mut busy_until = vec![0u64; n];
    let mut last = 0u64;
    while let Some(Reverse((t, rpe, left))) = heap.pop() {
        subblock_events[rpe / sa] += 1;
        let end = t + fill + 1;
        let from = t.max(busy_until[rpe]);
        if from < end {
            diff[from as usize] += 1;
            diff[end as usize] -= 1;
            busy_until[rpe] = end;
        }
        last = last.max(end);
        if left > 1 {
            heap.push(Reverse((t + 1, rpe, left - 1)));
        }
    }
    let mut hist = Vec::with_capacity(last as usize);
    let mut run = 0i64;
    for d in diff.iter().take(last as usize) {
        run += d;
        hist.push(run as u32);
    }
    Ok(SimResult { measured_cycles: last, analytic_cycles: e.op_cycles, active_histogram: hist, subblock_events, products })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c1_1_maps_to_full_array() {
        let l = LayerSpec::conv("C1_1", 3, 3, 64, 32, 32).with_pad(1);
        let e = map_layer(&l, &ArrayConfig::default()).unwrap();
        assert_eq!(e.kmac_ops, 1728);
        assert_eq!(e.op_cycles, 1728);
        assert_eq!(e.utilization_pct, 100.0);
    }

    #[test]
    fn fc6_uses_every_rpe() {
        let e = map_layer(&LayerSpec::fc("FC6", 512, 4096), &ArrayConfig::default()).unwrap();
        assert_eq!(e.op_cycles, 2048);
        assert_eq!(e.active_rpes, 1024);
    }

    #[test]
    fn unit_layer() {
        let l = LayerSpec::conv("u", 1, 1, 1, 1, 1);
        let e = map_layer(&l, &ArrayConfig::default()).unwrap();
        assert_eq!(e.op_cycles, 1);
        assert_eq!(e.active_rpes, 1);
        let s = simulate_cycles(&l, &ArrayConfig::default()).unwrap();
        assert_eq!(s.measured_cycles, 1 + 4);
    }

    #[test]
    fn pruning_parse() {
        assert_eq!("4:9".parse::<PruningSpec>().unwrap(), PruningSpec { num: 4, den: 9 });
        assert_eq!("40%".parse::<PruningSpec>().unwrap(), PruningSpec { num: 2, den: 5 });
        assert_eq!("0.4".parse::<PruningSpec>().unwrap(), PruningSpec { num: 2, den: 5 });
        assert!("9:9".parse::<PruningSpec>().is_err());
        assert!("abc".parse::<PruningSpec>().is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = parse_network("c1 conv k=3 cin=3 cout=8 h=8 w=8\nc2 conv k=x\n").unwrap_err();
        assert!(matches!(e, SycoreError::Parse { line: 2, .. }));
    }
}
