//! Python bindings. Values cross the boundary as floats; formats as `"Q8.4"` strings
//! or `Format` objects; reports as JSON strings.

use std::path::Path;

use ::cordic_rpe::analysis::{self, InputGrid, SweepFunction, SweepSpec};
use ::cordic_rpe::cordic::{self, ExpSign};
use ::cordic_rpe::fxp::{FxpFormat, FxpValue, RoundingMode};
use ::cordic_rpe::netrun::{self, Engine, InferConfig};
use ::cordic_rpe::rpe::{self, AfKind, RpeConfig, RpeTrace};
use ::cordic_rpe::sycore::{self, ArrayConfig, PruningSpec};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

/// A signed Q-format.
#[pyclass(name = "Format", frozen, eq, hash, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PyFormat(FxpFormat);

#[pymethods]
impl PyFormat {
    #[new]
    fn new(word_bits: u32, frac_bits: u32) -> PyResult<Self> {
        FxpFormat::new(word_bits, frac_bits).map(PyFormat).map_err(err)
    }

    #[staticmethod]
    fn parse(s: &str) -> PyResult<Self> {
        parse(s).map(PyFormat)
    }

    #[getter]
    fn word_bits(&self) -> u32 {
        self.0.word_bits()
    }

    #[getter]
    fn frac_bits(&self) -> u32 {
        self.0.frac_bits()
    }

    #[getter]
    fn ulp(&self) -> f64 {
        self.0.ulp()
    }

    #[getter]
    fn min_value(&self) -> f64 {
        self.0.min_value()
    }

    #[getter]
    fn max_value(&self) -> f64 {
        self.0.max_value()
    }

    /// Raw integer of `value` after quantization.
    #[pyo3(signature = (value, rounding = "truncate"))]
    fn quantize(&self, value: f64, rounding: &str) -> PyResult<i64> {
        Ok(FxpValue::quantize(value, self.0, parse(rounding)?).raw())
    }

    fn to_real(&self, raw: i64) -> PyResult<f64> {
        Ok(FxpValue::from_raw(raw, self.0).map_err(err)?.to_real())
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Format('{}')", self.0)
    }
}

#[derive(FromPyObject)]
enum FormatArg {
    Obj(PyFormat),
    Str(String),
}

impl FormatArg {
    fn get(&self) -> PyResult<FxpFormat> {
        match self {
            FormatArg::Obj(f) => Ok(f.0),
            FormatArg::Str(s) => parse(s),
        }
    }
}

fn q(v: f64, fmt: FxpFormat) -> FxpValue {
    FxpValue::quantize(v, fmt, RoundingMode::Truncate)
}

/// `bias + x * w` from `n` linear rotations; inputs are truncated to the format.
#[pyfunction]
#[pyo3(signature = (x, w, bias = 0.0, n = 5, format = FormatArg::Str("Q8.4".into())))]
fn linear_mac(x: f64, w: f64, bias: f64, n: usize, format: FormatArg) -> PyResult<f64> {
    let f = format.get()?;
    let (y, _) = cordic::linear_mac_prescaled(q(x, f), q(w, f), q(bias, f), n).map_err(err)?;
    Ok(y.to_real())
}

/// `e^angle` (or `e^-angle` with `negate=True`) from the hyperbolic unit.
#[pyfunction]
#[pyo3(signature = (angle, n = 5, format = FormatArg::Str("Q8.4".into()), negate = false))]
fn exp(angle: f64, n: usize, format: FormatArg, negate: bool) -> PyResult<f64> {
    let f = format.get()?;
    let sign = if negate { ExpSign::Minus } else { ExpSign::Plus };
    Ok(cordic::exp_of(q(angle, f), n, sign).map_err(err)?.to_real())
}

/// `num / den` from `n` linear vectoring iterations.
#[pyfunction]
#[pyo3(signature = (num, den, n = 4, format = FormatArg::Str("Q8.4".into())))]
fn divide(num: f64, den: f64, n: usize, format: FormatArg) -> PyResult<f64> {
    let f = format.get()?;
    Ok(cordic::linear_divide(q(num, f), q(den, f), n).map_err(err)?.to_real())
}

/// One reconfigurable processing element.
#[pyclass(name = "Rpe", frozen)]
struct PyRpe {
    inner: rpe::Rpe,
}

impl PyRpe {
    fn fmt(&self) -> FxpFormat {
        self.inner.config().format
    }
}

#[pymethods]
impl PyRpe {
    #[new]
    #[pyo3(signature = (af = "relu", format = FormatArg::Str("Q8.4".into()), mac_stages = 5, hyp_iterations = 5, div_iterations = 4, softmax_len = 1))]
    fn new(af: &str, format: FormatArg, mac_stages: u32, hyp_iterations: u32, div_iterations: u32, softmax_len: usize) -> PyResult<Self> {
        let cfg = RpeConfig { format: format.get()?, mac_stages, hyp_iterations, div_iterations, af: parse::<AfKind>(af)?, softmax_len };
        Ok(Self { inner: rpe::Rpe::new(cfg).map_err(err)? })
    }

    #[getter]
    fn af_cycles(&self) -> u64 {
        self.inner.config().af_cycles()
    }

    fn mac_cycles(&self, len: usize) -> u64 {
        self.inner.config().mac_cycles(len)
    }

    /// `(value, cycles, saturated)` of the MAC stream.
    #[pyo3(signature = (inputs, weights, bias = 0.0))]
    fn mac_stream(&self, inputs: Vec<f64>, weights: Vec<f64>, bias: f64) -> PyResult<(f64, u64, bool)> {
        let f = self.fmt();
        let xs: Vec<FxpValue> = inputs.iter().map(|&v| q(v, f)).collect();
        let ws: Vec<FxpValue> = weights.iter().map(|&v| q(v, f)).collect();
        let o = self.inner.mac_stream(&xs, &ws, q(bias, f)).map_err(err)?;
        Ok((o.acc.to_real(), o.cycles, o.saturated))
    }

    /// `(value, cycles, saturated)` of the configured activation.
    fn activate(&self, x: f64) -> PyResult<(f64, u64, bool)> {
        let o = self.inner.activate(q(x, self.fmt())).map_err(err)?;
        Ok((o.value.to_real(), o.cycles, o.saturated))
    }

    fn softmax(&self, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        let f = self.fmt();
        let v: Vec<FxpValue> = xs.iter().map(|&x| q(x, f)).collect();
        Ok(self.inner.softmax(&v).map_err(err)?.probs.iter().map(|p| p.to_real()).collect())
    }

    /// Text trace of the control FSM for a stream of `len` products.
    fn trace(&self, len: usize) -> String {
        RpeTrace::for_program(self.inner.config(), len).to_text()
    }
}

/// Pareto sweep as CSV text.
#[pyfunction]
#[pyo3(signature = (function, formats, iterations, grid = "exhaustive", rounding = "truncate", seed = 42))]
fn pareto_csv(function: &str, formats: Vec<String>, iterations: (u32, u32), grid: &str, rounding: &str, seed: u64) -> PyResult<String> {
    let spec = SweepSpec {
        function: parse::<SweepFunction>(function)?,
        formats: formats.iter().map(|s| parse(s)).collect::<PyResult<_>>()?,
        iterations,
        grid: parse::<InputGrid>(grid)?,
        rounding: parse(rounding)?,
        seed,
    };
    let rows = analysis::pareto_sweep(&spec).map_err(err)?;
    Ok(analysis::rows_to_csv(&rows, &[]))
}

/// Normalized MAC error metrics as JSON.
#[pyfunction]
#[pyo3(signature = (format = FormatArg::Str("Q8.4".into()), iterations = 5))]
fn mac_metrics(format: FormatArg, iterations: u32) -> PyResult<String> {
    let m = analysis::mac_normalized_metrics(format.get()?, iterations).map_err(err)?;
    serde_json::to_string(&m).map_err(err)
}

fn array_config(array: (usize, usize), subblock: (usize, usize)) -> PyResult<ArrayConfig> {
    ArrayConfig::new(array.0, array.1, subblock.0, subblock.1).map_err(err)
}

/// Schedule report for a network description (text, not a path) as JSON.
#[pyfunction]
#[pyo3(signature = (network, array = (32, 32), subblock = (4, 4), prune = None))]
fn schedule(network: &str, array: (usize, usize), subblock: (usize, usize), prune: Option<&str>) -> PyResult<String> {
    let layers = sycore::parse_network(network).map_err(err)?;
    let prune = prune.map(parse::<PruningSpec>).transpose()?;
    let r = sycore::schedule_network(&layers, &array_config(array, subblock)?, prune).map_err(err)?;
    serde_json::to_string(&r).map_err(err)
}

/// `(measured_cycles, analytic_cycles, active_histogram)` for one layer of a network description.
#[pyfunction]
#[pyo3(signature = (network, layer, array = (32, 32), subblock = (4, 4), mac_stages = 5))]
fn simulate(network: &str, layer: &str, array: (usize, usize), subblock: (usize, usize), mac_stages: u32) -> PyResult<(u64, u64, Vec<u32>)> {
    let layers = sycore::parse_network(network).map_err(err)?;
    let l = layers.iter().find(|l| l.name == layer).ok_or_else(|| err(format!("no layer `{layer}`")))?;
    let mut a = array_config(array, subblock)?;
    a.rpe_config.mac_stages = mac_stages;
    let r = sycore::simulate_cycles(l, &a).map_err(err)?;
    Ok((r.measured_cycles, r.analytic_cycles, r.active_histogram))
}

/// Run a model (manifest path) on IDX images/labels; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, images, labels, engine = "cordic", format = FormatArg::Str("Q8.4".into()), iterations = 5, prune = None, limit = None))]
#[allow(clippy::too_many_arguments)]
fn infer(
    py: Python<'_>,
    model: &str,
    images: &str,
    labels: &str,
    engine: &str,
    format: FormatArg,
    iterations: u32,
    prune: Option<&str>,
    limit: Option<usize>,
) -> PyResult<String> {
    let mut m = netrun::load_model(Path::new(model)).map_err(err)?;
    if let Some(p) = prune {
        m = netrun::prune_model(&m, parse(p)?);
    }
    let (mut im, mut lb) = netrun::load_mnist(Path::new(images), Path::new(labels)).map_err(err)?;
    if let Some(k) = limit {
        let k = k.min(lb.len());
        let shape = [vec![k], im.shape()[1..].to_vec()].concat();
        let per: usize = im.shape()[1..].iter().product();
        im = netrun::Tensor::new(shape, im.data()[..k * per].to_vec()).map_err(err)?;
        lb.truncate(k);
    }
    let cfg = match parse::<Engine>(engine)? {
        Engine::Reference => InferConfig::reference(),
        Engine::Cordic => InferConfig::cordic(format.get()?, iterations),
    };
    let (_, report) = py.detach(|| netrun::infer(&m, &im, &lb, &cfg)).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
fn cordic_rpe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFormat>()?;
    m.add_class::<PyRpe>()?;
    m.add_function(wrap_pyfunction!(linear_mac, m)?)?;
    m.add_function(wrap_pyfunction!(exp, m)?)?;
    m.add_function(wrap_pyfunction!(divide, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_csv, m)?)?;
    m.add_function(wrap_pyfunction!(mac_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
