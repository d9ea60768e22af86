//! Command-line pipeline: generate, simulate, fit, infer, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::admm::{solve, SolverConfig};
use crate::datagen::{random_model, simulate_generated, GenConfig};
use crate::error::{FhmmError, Result};
use crate::exact::{exact_map_enumerate, exact_map_viterbi};
use crate::experiment::{nde_sweep, SweepConfig};
use crate::io;
use crate::learning::{build_unregistered, fit_supervised, residual_sigma, LearnConfig};
use crate::metrics::{evaluate, write_plot_csv, EvalReport};
use crate::model::{objective, EdgeMode, FhmmModel, StateSequence};
use crate::relaxation::build;
use crate::rounding::{admm_rr, naive_round, RoundingConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fhmm-sdp",
    version,
    about = "Energy disaggregation with factorial HMMs and an SDP relaxation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random appliance model.
    GenModel(GenModelArgs),
    /// Sample states and an aggregate trace from a model.
    Simulate(SimulateArgs),
    /// Fit appliance models from labeled per-appliance readings.
    Fit(FitArgs),
    /// Infer appliance states from an aggregate trace.
    Infer(InferArgs),
    /// Exact MAP inference (small instances only).
    InferExact(InferExactArgs),
    /// Score inferred states against ground truth.
    Evaluate(EvaluateArgs),
    /// Write the relaxation data (costs and constraint operators) as JSON lines.
    DumpProblem(DumpArgs),
    /// NDE of ADMM-RR and naive rounding over appliance and state counts.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Run manifest path [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(short = 'M', long = "appliances")]
    pub appliances: usize,
    #[arg(short = 'K', long = "states")]
    pub states: usize,
    /// Trace length the model is intended for.
    #[arg(short = 'T', long = "len", default_value_t = 1000)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(short = 'T', long = "len")]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trace CSV with per-appliance truth.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write the generating states.
    #[arg(long)]
    pub states_out: Option<PathBuf>,
    /// Also write per-appliance readings as labeled training CSV.
    #[arg(long)]
    pub labeled_out: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Labeled CSV `t,appliance_id,watts`.
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(short = 'K', long = "states", default_value_t = 2)]
    pub states: usize,
    /// Append a generic appliance built from unexplained events of `--aggregate`.
    #[arg(long, requires = "aggregate")]
    pub unregistered: bool,
    /// Aggregate trace CSV for `--unregistered`.
    #[arg(long)]
    pub aggregate: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub event_threshold: f64,
    #[arg(long, default_value_t = 50.0)]
    pub match_tolerance: f64,
    #[arg(long, default_value_t = 4)]
    pub unregistered_states: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pseudo_count: f64,
    /// Observation noise [default: from the fit residuals]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Edge noise [default: sigma]
    #[arg(long)]
    pub sigma_diff: Option<f64>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Relaxation with argmax rounding.
    Admm,
    /// Relaxation with randomized rounding and greedy descent.
    AdmmRr,
    /// Joint-state dynamic programming.
    Exact,
}

#[derive(Debug, Args)]
pub struct EdgeArgs {
    /// Add the edge-matching cost to transitions.
    #[arg(long)]
    pub use_edges: bool,
    /// With --use-edges, subtract the edge cost instead of adding it.
    #[arg(long, requires = "use_edges")]
    pub paper_literal_sign: bool,
}

impl EdgeArgs {
    fn mode(&self) -> EdgeMode {
        match (self.use_edges, self.paper_literal_sign) {
            (false, _) => EdgeMode::Off,
            (true, false) => EdgeMode::On,
            (true, true) => EdgeMode::Subtracted,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::AdmmRr)]
    pub method: Method,
    #[arg(long, default_value_t = 0.001)]
    pub mu_step: f64,
    #[arg(long, default_value_t = 2500)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub samples_per_window: usize,
    #[arg(long, default_value_t = 250)]
    pub trigger_period: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub edges: EdgeArgs,
    /// States CSV.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Residual log CSV of the solver.
    #[arg(long)]
    pub residual_log: Option<PathBuf>,
    /// Rounding and solver diagnostics JSON [default: <output>.diagnostics.json]
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct InferExactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    /// Enumerate every sequence instead of dynamic programming.
    #[arg(long)]
    pub enumerate: bool,
    #[command(flatten)]
    pub edges: EdgeArgs,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Trace CSV with per-appliance truth columns.
    #[arg(long)]
    pub trace: PathBuf,
    /// Inferred states CSV.
    #[arg(long)]
    pub states: PathBuf,
    /// True states CSV [default: nearest level of each true reading]
    #[arg(long)]
    pub truth_states: Option<PathBuf>,
    /// Report JSON.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Plain-text table.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub edges: EdgeArgs,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Appliance counts, at K = 2.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub appliances: Vec<usize>,
    /// State counts, at M = 2.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub states: Vec<usize>,
    #[arg(short = 'T', long = "len", default_value_t = 200)]
    pub len: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.001)]
    pub mu_step: f64,
    #[arg(long, default_value_t = 2500)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub samples_per_window: usize,
    #[arg(long, default_value_t = 250)]
    pub trigger_period: usize,
    /// Plot CSV `metric,x,y`.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-instance results JSON.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

/// Record of one run: what went in, what came out, and how long it took.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    subcommand: &'static str,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    results: Value,
    timings_ms: BTreeMap<String, f64>,
}

struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(subcommand: &'static str, config: Value, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                subcommand,
                config,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                results: Value::Null,
                timings_ms: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.manifest
            .timings_ms
            .insert(name.to_string(), t0.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.manifest.inputs.push(hash);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.manifest.outputs.push(hash);
        Ok(())
    }

    fn finish(mut self, explicit: Option<&Path>, primary: &Path) -> Result<()> {
        self.manifest
            .timings_ms
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let path = explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| sibling(primary, "manifest.json"));
        io::write_json(&path, &self.manifest)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| FhmmError::io(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn gen_model(a: &GenModelArgs) -> Result<()> {
    let cfg = GenConfig::new(a.appliances, a.states, a.len, a.seed);
    let mut run = Run::new(
        "gen-model",
        serde_json::to_value(&cfg).unwrap_or(Value::Null),
        Some(a.seed),
    );
    let model = run.stage("generate", || random_model(&cfg))?;
    io::write_model(&a.output, &model)?;
    run.output(&a.output)?;
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let mut run = Run::new("simulate", json!({ "len": a.len }), Some(a.seed));
    let model = io::read_model(&a.model)?;
    run.input(&a.model)?;
    let (states, trace) = run.stage("simulate", || simulate_generated(&model, a.len, a.seed))?;
    io::write_trace(&a.output, &trace)?;
    run.output(&a.output)?;
    if let Some(p) = &a.states_out {
        io::write_states(p, &states, &model)?;
        run.output(p)?;
    }
    if let Some(p) = &a.labeled_out {
        let per = trace.per_appliance.clone().unwrap_or_default();
        let labeled: Vec<io::LabeledTrace> = (0..model.num_appliances())
            .map(|i| io::LabeledTrace {
                id: format!("app_{}", i + 1),
                watts: per.iter().map(|row| row[i]).collect(),
            })
            .collect();
        io::write_labeled(p, &labeled)?;
        run.output(p)?;
    }
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn fit_cmd(a: &FitArgs) -> Result<()> {
    let cfg = LearnConfig {
        event_threshold: a.event_threshold,
        match_tolerance: a.match_tolerance,
        unregistered_states: a.unregistered_states,
        pseudo_count: a.pseudo_count,
    };
    let mut run = Run::new(
        "fit",
        json!({ "K": a.states, "learn": cfg, "unregistered": a.unregistered,
                "sigma": a.sigma, "sigma_diff": a.sigma_diff }),
        None,
    );
    let labeled = io::read_labeled(&a.labeled)?;
    run.input(&a.labeled)?;
    let mut warnings = Vec::new();
    let mut appliances = Vec::new();
    let mut noise_var = 0.0;
    run.stage("fit", || {
        for tr in &labeled {
            let fit = fit_supervised(&tr.watts, a.states, &cfg)?;
            noise_var += residual_sigma(&tr.watts, &fit.appliance).powi(2);
            warnings.extend(fit.warnings.into_iter().map(|w| format!("{}: {w}", tr.id)));
            appliances.push(fit.appliance);
        }
        Ok(())
    })?;
    if a.unregistered {
        let path = a
            .aggregate
            .as_deref()
            .ok_or_else(|| FhmmError::InvalidInput("--unregistered needs --aggregate".into()))?;
        let trace = io::read_trace(path)?;
        run.input(path)?;
        let fit = run.stage("unregistered", || {
            build_unregistered(&trace.aggregate, &appliances, &cfg)
        })?;
        warnings.extend(
            fit.warnings
                .into_iter()
                .map(|w| format!("unregistered: {w}")),
        );
        appliances.push(fit.appliance);
    }
    // the aggregate noise is the sum of the per-appliance noise variances
    let sigma = a.sigma.unwrap_or_else(|| noise_var.sqrt().max(1.0));
    let model = FhmmModel::new(appliances, sigma, a.sigma_diff.unwrap_or(sigma));
    model.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    io::write_model(&a.output, &model)?;
    run.output(&a.output)?;
    run.manifest.results = json!({ "appliances": labeled.iter().map(|l| &l.id).collect::<Vec<_>>(),
                                   "sigma": sigma, "warnings": warnings });
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn numeric_abort(err: FhmmError, diagnostics: &Path) -> FhmmError {
    if let FhmmError::Numerical {
        t,
        variable,
        detail,
    } = &err
    {
        let body =
            json!({ "error": err.to_string(), "t": t, "variable": variable, "detail": detail });
        if io::write_json(diagnostics, &body).is_ok() {
            eprintln!("diagnostics written to {}", diagnostics.display());
        }
    }
    err
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let solver = SolverConfig {
        mu_step: a.mu_step,
        max_sweeps: a.max_sweeps,
        tolerance: a.tol,
        ..SolverConfig::default()
    };
    let rounding = RoundingConfig {
        samples_per_window: a.samples_per_window,
        trigger_period: a.trigger_period,
        seed: a.seed,
    };
    let edges = a.edges.mode();
    let mut run = Run::new(
        "infer",
        json!({ "method": a.method, "solver": solver, "rounding": rounding, "edges": edges }),
        Some(a.seed),
    );
    let model = io::read_model(&a.model)?;
    run.input(&a.model)?;
    let trace = io::read_trace(&a.trace)?;
    run.input(&a.trace)?;
    let diag_path = a
        .diagnostics
        .clone()
        .unwrap_or_else(|| sibling(&a.output, "diagnostics.json"));

    let states: StateSequence = match a.method {
        Method::Exact => {
            let (states, value) =
                run.stage("exact", || exact_map_viterbi(&model, &trace, edges))?;
            run.manifest.results = json!({ "objective": value });
            states
        }
        Method::Admm => {
            solver.validate()?;
            let problem = run.stage("build", || build(&model, &trace, edges))?;
            let sol = run
                .stage("solve", || solve(&problem, solver))
                .map_err(|e| numeric_abort(e, &diag_path))?;
            let states = naive_round(&sol, &model.num_states());
            let value = objective(&model, &trace, &states, edges)?;
            if let Some(p) = &a.residual_log {
                sol.write_history(io::create_file(p)?)?;
                run.output(p)?;
            }
            let body = json!({ "relaxed_objective": sol.objective, "converged": sol.converged,
                               "sweeps": sol.sweeps, "residuals": sol.residuals });
            io::write_json(&diag_path, &body)?;
            run.output(&diag_path)?;
            run.manifest.results = json!({ "objective": value, "relaxed_objective": sol.objective,
                                           "converged": sol.converged, "sweeps": sol.sweeps });
            states
        }
        Method::AdmmRr => {
            let out = run
                .stage("admm_rr", || {
                    admm_rr(&model, &trace, solver, rounding, edges)
                })
                .map_err(|e| numeric_abort(e, &diag_path))?;
            if let Some(p) = &a.residual_log {
                out.relaxed.write_history(io::create_file(p)?)?;
                run.output(p)?;
            }
            io::write_json(&diag_path, &out.diagnostics)?;
            run.output(&diag_path)?;
            run.manifest.results = json!({ "objective": out.objective,
                                           "naive_objective": out.naive_objective,
                                           "relaxed_objective": out.relaxed.objective,
                                           "converged": out.relaxed.converged,
                                           "sweeps": out.relaxed.sweeps });
            out.states
        }
    };
    io::write_states(&a.output, &states, &model)?;
    run.output(&a.output)?;
    println!("{}", run.manifest.results);
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn infer_exact_cmd(a: &InferExactArgs) -> Result<()> {
    let edges = a.edges.mode();
    let mut run = Run::new(
        "infer-exact",
        json!({ "enumerate": a.enumerate, "edges": edges }),
        None,
    );
    let model = io::read_model(&a.model)?;
    run.input(&a.model)?;
    let trace = io::read_trace(&a.trace)?;
    run.input(&a.trace)?;
    let (states, value) = run.stage("exact", || {
        if a.enumerate {
            exact_map_enumerate(&model, &trace, edges)
        } else {
            exact_map_viterbi(&model, &trace, edges)
        }
    })?;
    io::write_states(&a.output, &states, &model)?;
    run.output(&a.output)?;
    run.manifest.results = json!({ "objective": value });
    println!("{}", run.manifest.results);
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

/// Nearest power level of each true reading.
fn quantize(model: &FhmmModel, watts: &[Vec<f64>]) -> Result<StateSequence> {
    let rows = watts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&model.appliances)
                .map(|(&w, app)| {
                    let mut best = 0;
                    for (s, &l) in app.power_levels.iter().enumerate() {
                        if (w - l).abs() < (w - app.power_levels[best]).abs() {
                            best = s;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    StateSequence::from_rows(rows, &model.num_states())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate", json!({}), None);
    let model = io::read_model(&a.model)?;
    run.input(&a.model)?;
    let trace = io::read_trace(&a.trace)?;
    run.input(&a.trace)?;
    let estimate = io::read_states(&a.states, &model)?;
    run.input(&a.states)?;
    let truth_watts = trace.per_appliance.clone().ok_or_else(|| {
        FhmmError::parse(
            &a.trace,
            "evaluation needs per-appliance columns app_1..app_M",
        )
    })?;
    if truth_watts.first().map_or(0, Vec::len) != model.num_appliances()
        || estimate.len() != trace.len()
    {
        return Err(FhmmError::Dimension(format!(
            "model has {} appliances and trace {} steps; states have {} steps",
            model.num_appliances(),
            trace.len(),
            estimate.len()
        )));
    }
    let truth = match &a.truth_states {
        Some(p) => {
            let s = io::read_states(p, &model)?;
            run.input(p)?;
            s
        }
        None => quantize(&model, &truth_watts)?,
    };
    let report: EvalReport = run.stage("evaluate", || {
        evaluate(&model, &truth, &truth_watts, &estimate)
    })?;
    io::write_json(&a.output, &report)?;
    run.output(&a.output)?;
    let table = report.to_string();
    if let Some(p) = &a.table {
        io::write_text(p, &table)?;
        run.output(p)?;
    }
    print!("{table}");
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn dump_cmd(a: &DumpArgs) -> Result<()> {
    let edges = a.edges.mode();
    let mut run = Run::new("dump-problem", json!({ "edges": edges }), None);
    let model = io::read_model(&a.model)?;
    run.input(&a.model)?;
    let trace = io::read_trace(&a.trace)?;
    run.input(&a.trace)?;
    let problem = run.stage("build", || build(&model, &trace, edges))?;
    let out = io::create_file(&a.output)?;
    problem.dump(out).map_err(|e| FhmmError::io(&a.output, e))?;
    run.output(&a.output)?;
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let cfg = SweepConfig {
        appliances: a.appliances.clone(),
        states: a.states.clone(),
        len: a.len,
        seeds: a.seeds,
        solver: SolverConfig {
            mu_step: a.mu_step,
            max_sweeps: a.max_sweeps,
            tolerance: a.tol,
            ..SolverConfig::default()
        },
        rounding: RoundingConfig {
            samples_per_window: a.samples_per_window,
            trigger_period: a.trigger_period,
            seed: 0,
        },
        ..SweepConfig::default()
    };
    let mut run = Run::new(
        "sweep",
        serde_json::to_value(&cfg).unwrap_or(Value::Null),
        None,
    );
    let result = run.stage("sweep", || nde_sweep(&cfg))?;
    write_plot_csv(&result.points, io::create_file(&a.output)?)?;
    run.output(&a.output)?;
    if let Some(p) = &a.instances {
        io::write_json(p, &result.instances)?;
        run.output(p)?;
    }
    run.finish(a.manifest.manifest.as_deref(), &a.output)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::InferExact(a) => infer_exact_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::DumpProblem(a) => dump_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
