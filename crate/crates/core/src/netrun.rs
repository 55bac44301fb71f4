//! Fixed-point inference: IDX ingestion, the manifest + blob model format,
//! quantization, magnitude pruning, and two engines.
//!
//! The reference engine runs in f64 on the stored weights. The cordic engine
//! quantizes weights and activations, computes every output with the RPE MAC
//! stream (bias first, then one linear rotation per product in a widened
//! accumulator, saturated once at the end) and applies the layer activation
//! through the RPE. Pooling and flattening are exact host operations.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{encode_weight, mac_encoded, EncodedWeight, MAX_ENCODED_ITERATIONS};
use crate::fxp::{FxpFormat, FxpValue, RoundingMode};
use crate::rpe::{ceil_log2, AfKind, Rpe, RpeConfig, RpeError};
use crate::sycore::{LayerKind, LayerSpec, PruningSpec};

#[derive(Debug, Error)]
pub enum NetrunError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg} (at byte offset {offset})")]
    Format { path: String, offset: usize, msg: String },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("{0} images but {1} labels")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Rpe(#[from] RpeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetrunError + '_ {
    move |source| NetrunError::Io { path: path.display().to_string(), source }
}

/// Dense row-major tensor of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NetrunError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NetrunError::Manifest(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sub-tensor `i` along the first axis.
    pub fn item(&self, i: usize) -> &[f64] {
        let step: usize = self.shape[1..].iter().product();
        &self.data[i * step..(i + 1) * step]
    }
}

/// Raw contents of an IDX file: dimensions and unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Read a file, inflating it when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, NetrunError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn parse_idx(bytes: &[u8], path: &str) -> Result<IdxArray, NetrunError> {
    let fmt_err = |offset, msg: String| NetrunError::Format { path: path.to_string(), offset, msg };
    if bytes.len() < 4 {
        return Err(NetrunError::Truncated { path: path.into(), expected: 4, actual: bytes.len() });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt_err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != 0x08 {
        return Err(fmt_err(2, format!("element type 0x{:02x} is not unsigned byte", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(fmt_err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(NetrunError::Truncated { path: path.into(), expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err(4, "dimensions overflow".into()))?;
    let expected = header + count;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(NetrunError::Truncated { path: path.into(), expected, actual: bytes.len() });
        }
        return Err(fmt_err(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

pub fn load_idx(path: &Path) -> Result<IdxArray, NetrunError> {
    parse_idx(&read_maybe_gz(path)?, &path.display().to_string())
}

/// Images as `[n, 1, rows, cols]` reals in `[0, 1]` and labels `0..=9`.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<(Tensor, Vec<u8>), NetrunError> {
    let im = load_idx(images)?;
    if im.dims.len() != 3 {
        return Err(NetrunError::Format {
            path: images.display().to_string(),
            offset: 3,
            msg: format!("expected 3 image dimensions, found {}", im.dims.len()),
        });
    }
    let lb = load_idx(labels)?;
    if lb.dims.len() != 1 {
        return Err(NetrunError::Format {
            path: labels.display().to_string(),
            offset: 3,
            msg: format!("expected 1 label dimension, found {}", lb.dims.len()),
        });
    }
    if let Some(pos) = lb.data.iter().position(|&l| l > 9) {
        return Err(NetrunError::Format { path: labels.display().to_string(), offset: 8 + pos, msg: format!("label {}", lb.data[pos]) });
    }
    if im.dims[0] != lb.dims[0] {
        return Err(NetrunError::LabelCount(im.dims[0], lb.dims[0]));
    }
    let data = im.data.iter().map(|&b| b as f64 / 255.0).collect();
    let t = Tensor::new(vec![im.dims[0], 1, im.dims[1], im.dims[2]], data)?;
    Ok((t, lb.data))
}

/// Location of a tensor in the blob: byte offset and shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantDefaults {
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub rounding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub quantization: QuantDefaults,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[cout][cin][k][k]` for conv, `[cout][cin]` for fc.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    /// `(channels, rows, cols)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub quantization: QuantDefaults,
}

impl Model {
    /// Build a model from in-memory layers and check that the shapes compose.
    pub fn new(name: &str, input_shape: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self, NetrunError> {
        let m = Self { name: name.into(), input_shape, layers, quantization: QuantDefaults::default() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), NetrunError> {
        let (mut c, mut h, mut w) = self.input_shape;
        for l in &self.layers {
            let s = &l.spec;
            let err = |msg: String| NetrunError::Shape { layer: s.name.clone(), msg };
            s.validate().map_err(|e| err(e.to_string()))?;
            match s.kind {
                LayerKind::Conv | LayerKind::Pool => {
                    if (s.cin, s.h, s.w) != (c, h, w) {
                        return Err(err(format!("expects input {}x{}x{}, previous layer gives {c}x{h}x{w}", s.cin, s.h, s.w)));
                    }
                    (h, w) = s.out_dims();
                    c = s.cout;
                }
                LayerKind::Flatten => {
                    if s.cout != c * h * w {
                        return Err(err(format!("flattens to {} values, input has {}", s.cout, c * h * w)));
                    }
                    (c, h, w) = (s.cout, 1, 1);
                }
                LayerKind::Fc => {
                    if s.cin != c * h * w {
                        return Err(err(format!("expects {} inputs, previous layer gives {}", s.cin, c * h * w)));
                    }
                    (c, h, w) = (s.cout, 1, 1);
                }
            }
            let (nw, nb) = match s.kind {
                LayerKind::Conv => (s.cout * s.cin * s.k * s.k, s.cout),
                LayerKind::Fc => (s.cout * s.cin, s.cout),
                _ => (0, 0),
            };
            if l.weights.len() != nw || l.bias.len() != nb {
                return Err(err(format!(
                    "needs {nw} weights and {nb} biases, has {} and {}",
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(err("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    /// Number of values produced by the last layer.
    pub fn output_len(&self) -> usize {
        let (mut c, mut h, mut w) = self.input_shape;
        for l in &self.layers {
            match l.spec.kind {
                LayerKind::Conv | LayerKind::Pool => {
                    (h, w) = l.spec.out_dims();
                    c = l.spec.cout;
                }
                _ => (c, h, w) = (l.spec.cout, 1, 1),
            }
        }
        c * h * w
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn nonzero_weights(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.weights).filter(|w| **w != 0.0).count()
    }
}

fn read_tensor(blob: &[u8], r: &TensorRef, layer: &str) -> Result<Vec<f64>, NetrunError> {
    let n: usize = r.shape.iter().product();
    let end = r.offset.checked_add(n * 4).filter(|&e| e <= blob.len()).ok_or_else(|| {
        NetrunError::Manifest(format!("layer `{layer}`: tensor at {}+{} runs past the blob ({} bytes)", r.offset, n * 4, blob.len()))
    })?;
    Ok(blob[r.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
}

/// Load a manifest and its blob.
pub fn load_model(manifest_path: &Path) -> Result<Model, NetrunError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| NetrunError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let blob_path: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let blob = read_maybe_gz(&blob_path)?;
    model_from_manifest(&m, &blob)
}

pub fn model_from_manifest(m: &ModelManifest, blob: &[u8]) -> Result<Model, NetrunError> {
    let input_shape = match m.input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(NetrunError::Manifest(format!("input_shape must be [c, h, w], got {:?}", m.input_shape))),
    };
    let mut layers = Vec::new();
    for ml in &m.layers {
        let name = &ml.spec.name;
        let weights = ml.weights.as_ref().map(|r| read_tensor(blob, r, name)).transpose()?.unwrap_or_default();
        let bias = ml.bias.as_ref().map(|r| read_tensor(blob, r, name)).transpose()?.unwrap_or_default();
        layers.push(Layer { spec: ml.spec.clone(), weights, bias });
    }
    let model = Model { name: m.name.clone(), input_shape, layers, quantization: m.quantization.clone() };
    model.validate()?;
    Ok(model)
}

/// Per-layer result of quantization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantStats {
    pub layer: String,
    pub saturated: usize,
    /// Weights with `|w| >= 2` that take the pre-scaled MAC path.
    pub prescaled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub spec: LayerSpec,
    pub weights: Vec<i64>,
    pub bias: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub format: FxpFormat,
    pub rounding: RoundingMode,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<QuantLayer>,
    pub stats: Vec<QuantStats>,
}

pub fn quantize_model(model: &Model, fmt: FxpFormat, mode: RoundingMode) -> QuantModel {
    let two = 2 * fmt.one_raw();
    let mut stats = Vec::new();
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let mut sat = 0;
            let mut q = |v: &f64| {
                let (x, s) = FxpValue::quantize_flagged(*v, fmt, mode);
                sat += s as usize;
                x.raw()
            };
            let weights: Vec<i64> = l.weights.iter().map(&mut q).collect();
            let bias: Vec<i64> = l.bias.iter().map(&mut q).collect();
            let prescaled = weights.iter().filter(|w| w.abs() >= two).count();
            stats.push(QuantStats { layer: l.spec.name.clone(), saturated: sat, prescaled });
            QuantLayer { spec: l.spec.clone(), weights, bias }
        })
        .collect();
    QuantModel { format: fmt, rounding: mode, input_shape: model.input_shape, layers, stats }
}

/// Zero the smallest-magnitude weights of every layer until `ceil((1 - f) * n)` remain.
/// Ties go to the lower tensor index first.
pub fn prune_model(model: &Model, spec: PruningSpec) -> Model {
    let mut out = model.clone();
    for l in &mut out.layers {
        let n = l.weights.len();
        let remove = n - spec.kept(n as u64) as usize;
        if remove == 0 {
            continue;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| l.weights[a].abs().total_cmp(&l.weights[b].abs()).then(a.cmp(&b)));
        for &i in &idx[..remove] {
            l.weights[i] = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Reference,
    Cordic,
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(Engine::Reference),
            "cordic" => Ok(Engine::Cordic),
            _ => Err(format!("unknown engine `{s}` (reference, cordic)")),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Reference => "reference",
            Engine::Cordic => "cordic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferConfig {
    pub engine: Engine,
    /// Operand format, MAC iterations (`mac_stages`) and AF iteration counts.
    pub rpe: RpeConfig,
    pub rounding: RoundingMode,
}

impl InferConfig {
    pub fn reference() -> Self {
        Self { engine: Engine::Reference, rpe: RpeConfig::default(), rounding: RoundingMode::Truncate }
    }

    pub fn cordic(fmt: FxpFormat, mac_iterations: u32) -> Self {
        let rpe = RpeConfig { format: fmt, mac_stages: mac_iterations, ..RpeConfig::default() };
        Self { engine: Engine::Cordic, rpe, rounding: RoundingMode::Truncate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: String,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub engine: Engine,
    pub model: String,
    pub top1: f64,
    pub correct: usize,
    pub samples: usize,
    /// Cordic engine only: output deviation from the reference engine, per layer.
    pub deviation: Vec<LayerDeviation>,
    pub quantization: Vec<QuantStats>,
    /// Outputs that saturated in the MAC or the activation.
    pub saturated_outputs: u64,
    pub config: InferConfig,
}

impl InferenceReport {
    pub fn summary(&self) -> String {
        format!("engine={} top1={:.4} n={}", self.engine, self.top1, self.samples)
    }
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-layer outputs of the reference engine (`None` for layers producing no new values).
fn reference_forward(model: &Model, input: &[f64]) -> Vec<Vec<f64>> {
    let (mut c, mut h, mut w) = model.input_shape;
    let mut x = input.to_vec();
    let mut outs = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let s = &l.spec;
        x = match s.kind {
            LayerKind::Conv => {
                let (oh, ow) = s.out_dims();
                let mut y = vec![0.0; s.cout * oh * ow];
                for co in 0..s.cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = l.bias[co];
                            for ci in 0..c {
                                for ky in 0..s.k {
                                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..s.k {
                                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += l.weights[((co * c + ci) * s.k + ky) * s.k + kx]
                                            * x[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            y[(co * oh + oy) * ow + ox] = ref_af(s.af, acc);
                        }
                    }
                }
                (c, h, w) = (s.cout, oh, ow);
                y
            }
            LayerKind::Pool => {
                let y = max_pool(&x, c, h, w, s, f64::NEG_INFINITY);
                (h, w) = s.out_dims();
                y
            }
            LayerKind::Flatten => {
                (c, h, w) = (s.cout, 1, 1);
                x
            }
            LayerKind::Fc => {
                let mut y: Vec<f64> = (0..s.cout)
                    .map(|o| {
                        let row = &l.weights[o * s.cin..(o + 1) * s.cin];
                        l.bias[o] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                if s.af == AfKind::Softmax {
                    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = y.iter().map(|v| (v - m).exp()).sum();
                    y.iter_mut().for_each(|v| *v = (*v - m).exp() / sum);
                } else {
                    y.iter_mut().for_each(|v| *v = ref_af(s.af, *v));
                }
                (c, h, w) = (s.cout, 1, 1);
                y
            }
        };
        outs.push(x.clone());
    }
    outs
}

fn ref_af(af: AfKind, x: f64) -> f64 {
    af.reference(x).unwrap_or(x)
}

/// Max pooling without padding over a `c x h x w` map.
fn max_pool<T: Copy + PartialOrd>(x: &[T], c: usize, h: usize, w: usize, s: &LayerSpec, floor: T) -> Vec<T> {
    let (oh, ow) = s.out_dims();
    let mut y = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = floor;
                for ky in 0..s.k {
                    for kx in 0..s.k {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let v = x[(ch * h + iy as usize) * w + ix as usize];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                }
                y.push(m);
            }
        }
    }
    y
}

/// Quantized layer with its weights encoded for the configured iteration count.
struct PreparedLayer {
    weights: Vec<EncodedWeight>,
    bias: Vec<i64>,
    /// Activation unit for activations other than relu/none/softmax.
    af: Option<Rpe>,
}

struct CordicEngine<'a> {
    q: &'a QuantModel,
    prepared: Vec<PreparedLayer>,
    rpe: Rpe,
    n: u32,
}

impl<'a> CordicEngine<'a> {
    fn new(q: &'a QuantModel, cfg: RpeConfig) -> Result<Self, NetrunError> {
        let n = cfg.mac_stages;
        if n == 0 || n > MAX_ENCODED_ITERATIONS {
            return Err(RpeError::Config(format!("MAC iterations must be in 1..={MAX_ENCODED_ITERATIONS}")).into());
        }
        let frac = q.format.frac_bits();
        let prepared = q
            .layers
            .iter()
            .map(|l| Ok(PreparedLayer {
                weights: l.weights.iter().map(|&w| encode_weight(w, n, frac)).collect(),
                bias: l.bias.clone(),
                af: match l.spec.af {
                    AfKind::Relu | AfKind::None | AfKind::Softmax => None,
                    af => Some(Rpe::new(cfg.with_af(af))?),
                },
            }))
            .collect::<Result<Vec<_>, RpeError>>()?;
        Ok(Self { q, prepared, rpe: Rpe::new(cfg)?, n })
    }

    /// Per-layer raw outputs and the number of saturated outputs.
    fn forward(&self, input: &[i64]) -> Result<(Vec<Vec<i64>>, u64), NetrunError> {
        let (mut c, mut h, mut w) = self.q.input_shape;
        let mut x = input.to_vec();
        let mut outs = Vec::with_capacity(self.q.layers.len());
        let mut sat = 0u64;
        for (l, p) in self.q.layers.iter().zip(&self.prepared) {
            let s = &l.spec;
            x = match s.kind {
                LayerKind::Conv => {
                    let (y, st) = self.conv(&x, (c, h, w), s, p)?;
                    sat += st;
                    (h, w) = s.out_dims();
                    c = s.cout;
                    y
                }
                LayerKind::Pool => {
                    let y = max_pool(&x, c, h, w, s, i64::MIN);
                    (h, w) = s.out_dims();
                    y
                }
                LayerKind::Flatten => {
                    (c, h, w) = (s.cout, 1, 1);
                    x
                }
                LayerKind::Fc => {
                    let (y, st) = self.fc(&x, s, p)?;
                    sat += st;
                    (c, h, w) = (s.cout, 1, 1);
                    y
                }
            };
            outs.push(x.clone());
        }
        Ok((outs, sat))
    }

    /// Saturate a finished accumulator to the operand format and apply the activation.
    fn finish(&self, acc: i64, af: AfKind, unit: Option<&Rpe>) -> Result<(i64, bool), NetrunError> {
        let fmt = self.q.format;
        let (v, s) = fmt.saturate(acc as i128);
        match (af, unit) {
            (AfKind::Relu, _) => Ok((v.max(0), s)),
            (_, Some(rpe)) => {
                let out = rpe.activate(FxpValue::from_raw(v, fmt).expect("saturated value is in range"))?;
                Ok((out.value.raw(), s | out.saturated))
            }
            _ => Ok((v, s)),
        }
    }

    /// Exact sequential MAC stream over `(x, w)` pairs, used when the fast path could clamp.
    fn mac_exact(&self, bias: i64, pairs: impl Iterator<Item = (i64, EncodedWeight)>, wide: FxpFormat) -> (i64, bool) {
        let (lo, hi) = (wide.min_raw(), wide.max_raw());
        let mut acc = bias;
        let mut sat = false;
        for (x, ew) in pairs {
            let (a, s) = mac_encoded(acc, x, ew, self.n, lo, hi);
            acc = a;
            sat |= s;
        }
        (acc, sat)
    }

    fn conv(&self, x: &[i64], (c, h, w): (usize, usize, usize), s: &LayerSpec, p: &PreparedLayer) -> Result<(Vec<i64>, u64), NetrunError> {
        let k = s.k;
        let (oh, ow) = s.out_dims();
        let (ph, pw) = (h + 2 * s.pad, w + 2 * s.pad);
        // zero-padded copy; zero inputs contribute nothing to a linear rotation
        let mut xp = vec![0i64; c * ph * pw];
        for ci in 0..c {
            for y in 0..h {
                let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
                let d = (ci * ph + y + s.pad) * pw + s.pad;
                xp[d..d + w].copy_from_slice(src);
            }
        }
        let wide = self.q.format.widened(ceil_log2(k * k * c));
        let hi = wide.max_raw() as u64;
        let n = self.n as i32;
        let mut out = vec![0i64; s.cout * oh * ow];
        let mut sat = 0u64;
        let mut acc = vec![0i64; oh * ow];
        let mut bound = vec![0u64; oh * ow];
        let mut row = vec![0i64; ow];
        for co in 0..s.cout {
            let b = p.bias[co];
            acc.fill(b);
            bound.fill(b.unsigned_abs());
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let ew = p.weights[((co * c + ci) * k + ky) * k + kx];
                        if !ew.active {
                            continue;
                        }
                        let kk = ew.k as i32;
                        for oy in 0..oh {
                            let base = (ci * ph + oy * s.stride + ky) * pw + kx;
                            for (ox, r) in row.iter_mut().enumerate() {
                                *r = xp[base + ox * s.stride];
                            }
                            let a = &mut acc[oy * ow..(oy + 1) * ow];
                            let bd = &mut bound[oy * ow..(oy + 1) * ow];
                            for (bv, r) in bd.iter_mut().zip(&row) {
                                *bv = bv.saturating_add(r.unsigned_abs() << (ew.k + 1));
                            }
                            let mut bits = ew.minus;
                            for i in -kk..(n - kk) {
                                let neg = bits & 1 == 1;
                                bits >>= 1;
                                if i >= 0 {
                                    let sh = i.min(63) as u32;
                                    if neg {
                                        a.iter_mut().zip(&row).for_each(|(y, r)| *y -= r >> sh);
                                    } else {
                                        a.iter_mut().zip(&row).for_each(|(y, r)| *y += r >> sh);
                                    }
                                } else {
                                    let sh = (-i) as u32;
                                    if neg {
                                        a.iter_mut().zip(&row).for_each(|(y, r)| *y -= r << sh);
                                    } else {
                                        a.iter_mut().zip(&row).for_each(|(y, r)| *y += r << sh);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let pix = oy * ow + ox;
                    let (mut v, mut s1) = (acc[pix], false);
                    if bound[pix] > hi {
                        // partial sums might have clamped: replay in stream order
                        let pairs = (0..c).flat_map(|ci| (0..k).flat_map(move |ky| (0..k).map(move |kx| (ci, ky, kx)))).map(|(ci, ky, kx)| {
                            let xi = xp[(ci * ph + oy * s.stride + ky) * pw + ox * s.stride + kx];
                            (xi, p.weights[((co * c + ci) * k + ky) * k + kx])
                        });
                        (v, s1) = self.mac_exact(b, pairs, wide);
                    }
                    let (y, s2) = self.finish(v, s.af, p.af.as_ref())?;
                    sat += (s1 | s2) as u64;
                    out[(co * oh + oy) * ow + ox] = y;
                }
            }
        }
        Ok((out, sat))
    }

    fn fc(&self, x: &[i64], s: &LayerSpec, p: &PreparedLayer) -> Result<(Vec<i64>, u64), NetrunError> {
        let wide = self.q.format.widened(ceil_log2(s.cin));
        let (lo, hi) = (wide.min_raw(), wide.max_raw());
        let mut out = Vec::with_capacity(s.cout);
        let mut sat = 0u64;
        for o in 0..s.cout {
            let ws = &p.weights[o * s.cin..(o + 1) * s.cin];
            let mut acc = p.bias[o];
            let mut s1 = false;
            for (xi, ew) in x.iter().zip(ws) {
                let (a, st) = mac_encoded(acc, *xi, *ew, self.n, lo, hi);
                acc = a;
                s1 |= st;
            }
            out.push(acc);
            sat += s1 as u64;
        }
        if s.af == AfKind::Softmax {
            let fmt = self.q.format;
            let vals: Vec<FxpValue> = out.iter().map(|&a| FxpValue::from_raw_saturating(a as i128, fmt).0).collect();
            let sm = Rpe::new(RpeConfig { af: AfKind::Softmax, softmax_len: vals.len(), ..*self.rpe.config() })?.softmax(&vals);
            return match sm {
                Ok(r) => Ok((r.probs.iter().map(|v| v.raw()).collect(), sat + r.saturated as u64)),
                // a degenerate row keeps its logits; the argmax is still meaningful
                Err(RpeError::DegenerateSoftmax { .. }) => Ok((vals.iter().map(|v| v.raw()).collect(), sat + 1)),
                Err(e) => Err(e.into()),
            };
        }
        let mut y = Vec::with_capacity(s.cout);
        for a in out {
            let (v, st) = self.finish(a, s.af, p.af.as_ref())?;
            sat += st as u64;
            y.push(v);
        }
        Ok((y, sat))
    }
}

#[derive(Default)]
struct Partial {
    sat: u64,
    dev_max: Vec<f64>,
    dev_sum: Vec<f64>,
    dev_n: Vec<u64>,
}

/// Run `engine` over `images` (`[n, c, h, w]`) and score top-1 against `labels`.
///
/// Returns the predicted class of every image and the report. Results do not
/// depend on how the images are split across threads.
pub fn infer(model: &Model, images: &Tensor, labels: &[u8], cfg: &InferConfig) -> Result<(Vec<usize>, InferenceReport), NetrunError> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(NetrunError::LabelCount(n, labels.len()));
    }
    let (c, h, w) = model.input_shape;
    if images.shape()[1..] != [c, h, w] {
        return Err(NetrunError::Shape { layer: "input".into(), msg: format!("images are {:?}, model expects {c}x{h}x{w}", &images.shape()[1..]) });
    }
    let nl = model.layers.len();
    let (preds, mut report) = match cfg.engine {
        Engine::Reference => {
            let preds: Vec<usize> = (0..n)
                .into_par_iter()
                .map(|i| argmax(reference_forward(model, images.item(i)).last().expect("model has layers")))
                .collect();
            (preds, InferenceReport {
                engine: Engine::Reference,
                model: model.name.clone(),
                top1: 0.0,
                correct: 0,
                samples: n,
                deviation: vec![],
                quantization: vec![],
                saturated_outputs: 0,
                config: *cfg,
            })
        }
        Engine::Cordic => {
            cfg.rpe.validate()?;
            let fmt = cfg.rpe.format;
            let q = quantize_model(model, fmt, cfg.rounding);
            let eng = CordicEngine::new(&q, cfg.rpe)?;
            let ulp = fmt.ulp();
            let results: Vec<Result<(usize, Partial), NetrunError>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let img = images.item(i);
                    let xq: Vec<i64> = img.iter().map(|&v| FxpValue::quantize(v, fmt, cfg.rounding).raw()).collect();
                    let (outs, sat) = eng.forward(&xq)?;
                    let refs = reference_forward(model, img);
                    let mut part = Partial { sat, dev_max: vec![0.0; nl], dev_sum: vec![0.0; nl], dev_n: vec![0; nl], ..Default::default() };
                    for (li, (o, r)) in outs.iter().zip(&refs).enumerate() {
                        for (a, b) in o.iter().zip(r) {
                            let d = (*a as f64 * ulp - b).abs();
                            part.dev_max[li] = part.dev_max[li].max(d);
                            part.dev_sum[li] += d;
                        }
                        part.dev_n[li] = o.len() as u64;
                    }
                    let last: Vec<f64> = outs.last().expect("model has layers").iter().map(|&v| v as f64).collect();
                    Ok((argmax(&last), part))
                })
                .collect();
            let mut preds = Vec::with_capacity(n);
            let mut tot = Partial { dev_max: vec![0.0; nl], dev_sum: vec![0.0; nl], dev_n: vec![0; nl], ..Default::default() };
            for r in results {
                let (p, part) = r?;
                preds.push(p);
                tot.sat += part.sat;
                for li in 0..nl {
                    tot.dev_max[li] = tot.dev_max[li].max(part.dev_max[li]);
                    tot.dev_sum[li] += part.dev_sum[li];
                    tot.dev_n[li] += part.dev_n[li];
                }
            }
            let deviation = model
                .layers
                .iter()
                .enumerate()
                .map(|(li, l)| LayerDeviation {
                    layer: l.spec.name.clone(),
                    max_abs: tot.dev_max[li],
                    mean_abs: if tot.dev_n[li] > 0 { tot.dev_sum[li] / tot.dev_n[li] as f64 } else { 0.0 },
                })
                .collect();
            (preds, InferenceReport {
                engine: Engine::Cordic,
                model: model.name.clone(),
                top1: 0.0,
                correct: 0,
                samples: n,
                deviation,
                quantization: q.stats.clone(),
                saturated_outputs: tot.sat,
                config: *cfg,
            })
        }
    };
    report.correct = preds.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    report.top1 = if n > 0 { report.correct as f64 / n as f64 } else { 0.0 };
    Ok((preds, report))
}

/// Outputs of every layer for one image under the cordic engine, as reals.
pub fn cordic_layer_outputs(model: &Model, image: &[f64], cfg: &InferConfig) -> Result<Vec<Vec<f64>>, NetrunError> {
    let fmt = cfg.rpe.format;
    let q = quantize_model(model, fmt, cfg.rounding);
    let eng = CordicEngine::new(&q, cfg.rpe)?;
    let xq: Vec<i64> = image.iter().map(|&v| FxpValue::quantize(v, fmt, cfg.rounding).raw()).collect();
    let (outs, _) = eng.forward(&xq)?;
    Ok(outs.into_iter().map(|o| o.into_iter().map(|v| v as f64 * fmt.ulp()).collect()).collect())
}

/// Outputs of every layer for one image under the reference engine.
pub fn reference_layer_outputs(model: &Model, image: &[f64]) -> Vec<Vec<f64>> {
    reference_forward(model, image)
}
