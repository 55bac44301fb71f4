use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cordic_rpe::analysis::{self, AnalysisError, InputGrid, SweepFunction, SweepSpec};
use cordic_rpe::cordic::CordicError;
use cordic_rpe::fxp::{FxpError, FxpFormat, RoundingMode};
use cordic_rpe::netrun::{self, Engine, InferConfig, NetrunError};
use cordic_rpe::rpe::{AfKind, Rpe, RpeConfig, RpeError};
use cordic_rpe::sycore::{self, ArrayConfig, PruningSpec, SycoreError};

#[derive(Parser)]
#[command(name = "cordic-rpe", version, about = "CORDIC processing element, systolic array scheduler and fixed-point inference")]
struct Cli {
    /// Worker threads (output does not depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Error sweep over formats and iteration counts (CSV).
    Pareto(ParetoArgs),
    /// Evaluate one activation function on a set of inputs (CSV).
    AfEval(AfEvalArgs),
    /// Normalized error metrics of the MAC over every operand pair (JSON).
    MacEval(MacEvalArgs),
    /// Map a network onto the array (CSV, or JSON with --json).
    Schedule(ScheduleArgs),
    /// Event-driven cycle count of network layers.
    Simulate(SimulateArgs),
    /// Run a model over an IDX image set.
    Infer(InferArgs),
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long = "fn")]
    function: SweepFunction,
    #[arg(long, value_delimiter = ',', default_value = "Q8.4,Q16.8,Q32.16")]
    formats: Vec<FxpFormat>,
    /// `A..B` (inclusive) or a single count.
    #[arg(long, default_value = "1..32", value_parser = parse_range)]
    iters: (u32, u32),
    /// `exhaustive`, `uniform:LO:HI:STEPS` or `list:A,B,...`.
    #[arg(long, default_value = "exhaustive")]
    grid: InputGrid,
    #[arg(long, default_value = "truncate")]
    rounding: RoundingMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AfEvalArgs {
    #[arg(long = "fn")]
    function: AfKind,
    #[arg(long, default_value = "Q8.4")]
    format: FxpFormat,
    #[arg(long, default_value_t = 5)]
    hyp_iters: u32,
    #[arg(long, default_value_t = 4)]
    div_iters: u32,
    #[arg(long, default_value_t = 5)]
    mac_stages: u32,
    /// Inputs; for softmax the whole list is one vector.
    #[arg(long, default_value = "exhaustive")]
    grid: InputGrid,
    #[arg(long, default_value = "truncate")]
    rounding: RoundingMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MacEvalArgs {
    #[arg(long, default_value = "Q8.4")]
    format: FxpFormat,
    #[arg(long, default_value_t = 5)]
    iters: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ArrayArgs {
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    array: (usize, usize),
    #[arg(long, default_value = "4x4", value_parser = parse_dims)]
    subblock: (usize, usize),
    /// MAC pipeline depth (iterations per product).
    #[arg(long, default_value_t = 5)]
    mac_stages: u32,
}

impl ArrayArgs {
    fn config(&self) -> Result<ArrayConfig, SycoreError> {
        let mut a = ArrayConfig::new(self.array.0, self.array.1, self.subblock.0, self.subblock.1)?;
        a.rpe_config.mac_stages = self.mac_stages;
        Ok(a)
    }
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    array: ArrayArgs,
    /// `A:B`, `P%` or a fraction.
    #[arg(long)]
    prune: Option<PruningSpec>,
    /// Emit the JSON report instead of CSV.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    network: PathBuf,
    /// Layer names to simulate (default: every array layer).
    #[arg(long, value_delimiter = ',')]
    layer: Vec<String>,
    #[command(flatten)]
    array: ArrayArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// IDX images followed by IDX labels (gzip accepted).
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "cordic")]
    engine: Engine,
    #[arg(long, default_value = "Q8.4")]
    format: FxpFormat,
    /// MAC iterations.
    #[arg(long, default_value_t = 5)]
    iters: u32,
    #[arg(long, default_value = "truncate")]
    rounding: RoundingMode,
    #[arg(long)]
    prune: Option<PruningSpec>,
    /// Evaluate a random subset of this many images (drawn with --seed).
    #[arg(long)]
    limit: Option<usize>,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let bad = || format!("expected A..B or N, got `{s}`");
    match s.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        }
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    sycore::parse_dims(s).ok_or_else(|| format!("expected RxC, got `{s}`"))
}

/// Exit codes: 2 usage, 3 input format, 4 numeric or range.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
    fn input(msg: impl ToString) -> Self {
        Self { code: 3, msg: msg.to_string() }
    }
    fn numeric(msg: impl ToString) -> Self {
        Self { code: 4, msg: msg.to_string() }
    }
}

impl From<FxpError> for Failure {
    fn from(e: FxpError) -> Self {
        Failure::numeric(e)
    }
}

impl From<CordicError> for Failure {
    fn from(e: CordicError) -> Self {
        Failure::numeric(e)
    }
}

impl From<RpeError> for Failure {
    fn from(e: RpeError) -> Self {
        match e {
            RpeError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::numeric(e),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Spec(_) | AnalysisError::GridTooLarge(..) => Failure::usage(e.to_string()),
            _ => Failure::numeric(e),
        }
    }
}

impl From<SycoreError> for Failure {
    fn from(e: SycoreError) -> Self {
        match e {
            SycoreError::Array(_) => Failure::usage(e.to_string()),
            SycoreError::TooLarge { .. } => Failure::numeric(e),
            _ => Failure::input(e),
        }
    }
}

impl From<NetrunError> for Failure {
    fn from(e: NetrunError) -> Self {
        match e {
            NetrunError::Rpe(r) => r.into(),
            _ => Failure::input(e),
        }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn pareto(a: &ParetoArgs, seed: u64) -> Result<(), Failure> {
    let spec = SweepSpec {
        function: a.function,
        formats: a.formats.clone(),
        iterations: a.iters,
        grid: a.grid.clone(),
        rounding: a.rounding,
        seed,
    };
    let rows = analysis::pareto_sweep(&spec)?;
    let formats: Vec<String> = a.formats.iter().map(|f| f.to_string()).collect();
    let comments = vec![
        format!("command=pareto fn={} formats={}", a.function, formats.join(",")),
        format!("iters={}..{} grid={} rounding={} seed={seed}", a.iters.0, a.iters.1, a.grid, a.rounding),
    ];
    emit(&a.out, &analysis::rows_to_csv(&rows, &comments))
}

fn af_eval(a: &AfEvalArgs) -> Result<(), Failure> {
    let xs = a.grid.points(a.format, a.rounding)?;
    let cfg = RpeConfig {
        format: a.format,
        mac_stages: a.mac_stages,
        hyp_iterations: a.hyp_iters,
        div_iterations: a.div_iters,
        af: a.function,
        softmax_len: if a.function == AfKind::Softmax { xs.len().max(1) } else { 1 },
    };
    let rpe = Rpe::new(cfg)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# command=af-eval fn={} format={} hyp_iters={} div_iters={} mac_stages={} grid={} rounding={}",
        a.function, a.format, a.hyp_iters, a.div_iters, a.mac_stages, a.grid, a.rounding
    );
    s.push_str("x,output,reference,abs_err,cycles,saturated\n");
    if a.function == AfKind::Softmax {
        let out = rpe.softmax(&xs)?;
        let m = xs.iter().map(|v| v.to_real()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xs.iter().map(|v| (v.to_real() - m).exp()).sum();
        for (x, y) in xs.iter().zip(&out.probs) {
            let r = (x.to_real() - m).exp() / sum;
            let _ = writeln!(s, "{},{},{},{:.8e},{},{}", x.to_real(), y.to_real(), r, (y.to_real() - r).abs(), out.cycles, out.saturated);
        }
    } else {
        for x in &xs {
            let y = rpe.activate(*x)?;
            let r = a.function.reference(x.to_real()).unwrap_or(x.to_real());
            let _ = writeln!(s, "{},{},{},{:.8e},{},{}", x.to_real(), y.value.to_real(), r, (y.value.to_real() - r).abs(), y.cycles, y.saturated);
        }
    }
    emit(&a.out, &s)
}

fn mac_eval(a: &MacEvalArgs) -> Result<(), Failure> {
    let m = analysis::mac_normalized_metrics(a.format, a.iters)?;
    let v = serde_json::json!({
        "config": { "command": "mac-eval", "format": a.format.to_string(), "iterations": a.iters },
        "metrics": m,
    });
    emit(&a.out, &json(&v))
}

fn schedule(a: &ScheduleArgs) -> Result<(), Failure> {
    let layers = sycore::load_network(&a.network)?;
    let array = a.array.config()?;
    let r = sycore::schedule_network(&layers, &array, a.prune)?;
    if a.json {
        return emit(&a.out, &json(&r));
    }
    let mut s = format!(
        "# command=schedule network={} array={}x{} subblock={}x{} prune={}\n# mapping: {}\n",
        a.network.display(),
        array.rows,
        array.cols,
        array.subblock_rows,
        array.subblock_cols,
        a.prune.map_or("none".to_string(), |p| p.to_string()),
        sycore::MAPPING_RULE
    );
    let _ = writeln!(s, "# utilization mac_weighted={:.2} mean={:.2}", r.utilization_mac_weighted, r.utilization_mean);
    s.push_str(&r.to_csv());
    emit(&a.out, &s)
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let layers = sycore::load_network(&a.network)?;
    let array = a.array.config()?;
    for name in &a.layer {
        if !layers.iter().any(|l| &l.name == name) {
            return Err(Failure::usage(format!("--layer: no layer named `{name}` in {}", a.network.display())));
        }
    }
    let mut s = format!(
        "# command=simulate network={} array={}x{} subblock={}x{} mac_stages={}\n",
        a.network.display(),
        array.rows,
        array.cols,
        array.subblock_rows,
        array.subblock_cols,
        array.rpe_config.mac_stages
    );
    s.push_str("layer,analytic_cycles,measured_cycles,overhead,products,peak_active,mean_active,busy_subblocks\n");
    for l in layers.iter().filter(|l| l.kind.on_array()) {
        if !a.layer.is_empty() && !a.layer.contains(&l.name) {
            continue;
        }
        let r = sycore::simulate_cycles(l, &array)?;
        let peak = r.active_histogram.iter().max().copied().unwrap_or(0);
        let mean = if r.active_histogram.is_empty() {
            0.0
        } else {
            r.active_histogram.iter().map(|&v| v as f64).sum::<f64>() / r.active_histogram.len() as f64
        };
        let busy = r.subblock_events.iter().filter(|&&e| e > 0).count();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.2},{}",
            l.name,
            r.analytic_cycles,
            r.measured_cycles,
            r.measured_cycles - r.analytic_cycles,
            r.products,
            peak,
            mean,
            busy
        );
    }
    emit(&a.out, &s)
}

fn infer(a: &InferArgs, seed: u64) -> Result<(), Failure> {
    if a.data.len() != 2 {
        return Err(Failure::usage("--data needs an image file and a label file"));
    }
    for p in [&a.model, &a.data[0], &a.data[1]] {
        if !Path::new(p).exists() {
            return Err(Failure::input(format!("{}: no such file", p.display())));
        }
    }
    let mut model = netrun::load_model(&a.model)?;
    if let Some(p) = a.prune {
        model = netrun::prune_model(&model, p);
    }
    let (mut images, mut labels) = netrun::load_mnist(&a.data[0], &a.data[1])?;
    if let Some(k) = a.limit {
        (images, labels) = subset(&images, &labels, k, seed)?;
    }
    let cfg = match a.engine {
        Engine::Reference => InferConfig { rounding: a.rounding, ..InferConfig::reference() },
        Engine::Cordic => InferConfig { rounding: a.rounding, ..InferConfig::cordic(a.format, a.iters) },
    };
    let (_, report) = netrun::infer(&model, &images, &labels, &cfg)?;
    if let Some(p) = &a.out {
        let v = serde_json::json!({
            "config": {
                "command": "infer",
                "model": a.model.display().to_string(),
                "data": a.data.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
                "engine": a.engine,
                "format": a.format.to_string(),
                "iters": a.iters,
                "rounding": a.rounding.to_string(),
                "prune": a.prune.map(|p| p.to_string()),
                "limit": a.limit,
                "seed": seed,
            },
            "report": report,
        });
        emit(&Some(p.clone()), &json(&v))?;
    }
    println!("{}", report.summary());
    Ok(())
}

/// `k` images drawn without replacement, kept in file order.
fn subset(images: &netrun::Tensor, labels: &[u8], k: usize, seed: u64) -> Result<(netrun::Tensor, Vec<u8>), Failure> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let n = labels.len();
    if k == 0 || k > n {
        return Err(Failure::usage(format!("--limit must be in 1..={n}")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut data = Vec::with_capacity(k * images.item(0).len());
    for &i in &idx {
        data.extend_from_slice(images.item(i));
    }
    let mut shape = images.shape().to_vec();
    shape[0] = k;
    Ok((netrun::Tensor::new(shape, data).map_err(Failure::input)?, idx.iter().map(|&i| labels[i]).collect()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| Failure::usage(e.to_string()))?;
    }
    match &cli.cmd {
        Cmd::Pareto(a) => pareto(a, cli.seed),
        Cmd::AfEval(a) => af_eval(a),
        Cmd::MacEval(a) => mac_eval(a),
        Cmd::Schedule(a) => schedule(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Infer(a) => infer(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
