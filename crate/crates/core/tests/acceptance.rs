//! Acceptance checks. Each test writes one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts on the same condition.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use fhmm_sdp::admm::SolverConfig;
use fhmm_sdp::datagen::{random_model, simulate_generated, GenConfig};
use fhmm_sdp::exact::{exact_map_enumerate, exact_map_viterbi};
use fhmm_sdp::experiment::{nde_sweep, trace_seed, SweepConfig};
use fhmm_sdp::learning::{fit_supervised, LearnConfig};
use fhmm_sdp::linalg::psd_project;
use fhmm_sdp::model::{
    simulate, ApplianceHmm, EdgeMode, FhmmModel, LogZero, Objective, ObservationTrace,
    StateSequence,
};
use fhmm_sdp::relaxation::{build, lift, relaxed_objective};
use fhmm_sdp::rounding::{admm_rr, greedy_descent, RoundingConfig, RoundingOutcome};

fn report(criterion: u32, pass: bool, what: &str, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {criterion:>2} {verdict}: {what} ({detail})"
    );
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn instance(m: usize, k: usize, len: usize, seed: u64) -> (FhmmModel, ObservationTrace) {
    let model = random_model(&GenConfig::new(m, k, len, seed)).unwrap();
    let (_, trace) = simulate_generated(&model, len, trace_seed(seed)).unwrap();
    (model, trace)
}

fn random_states<R: Rng>(rng: &mut R, len: usize, num_states: &[usize]) -> StateSequence {
    let rows = (0..len)
        .map(|_| num_states.iter().map(|&k| rng.random_range(0..k)).collect())
        .collect();
    StateSequence::from_rows(rows, num_states).unwrap()
}

#[test]
fn c01_viterbi_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let m = rng.random_range(1..=2);
        let len = rng.random_range(1..=6);
        let (model, trace) = instance(m, 2, len, 1000 + seed);
        let edges = EdgeMode::from(seed % 2 == 1);
        let (_, v) = exact_map_viterbi(&model, &trace, edges).unwrap();
        let (_, e) = exact_map_enumerate(&model, &trace, edges).unwrap();
        if v != e {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed <= Duration::from_secs(30);
    report(
        1,
        pass,
        "viterbi and enumeration agree on 100 instances",
        &format!("{mismatches} mismatches, {:.2} s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn c02_integral_lift_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut failures = 0;
    for seed in 0..50u64 {
        let m = rng.random_range(1..=3);
        let k = rng.random_range(2..=3);
        let len = rng.random_range(2..=8);
        let (model, trace) = instance(m, k, len, 2000 + seed);
        let edges = EdgeMode::from(rng.random_bool(0.5));
        let states = random_states(&mut rng, len, &model.num_states());
        let problem = build(&model, &trace, edges).unwrap();
        let point = lift(&states, &model.num_states());
        let lhs = relaxed_objective(&problem, &point).unwrap();
        let rhs = Objective::new(&model, &trace, edges, LogZero::Penalty)
            .unwrap()
            .total(&states);
        let (a, c) = problem.max_residuals(&point);
        // The lifted form expands (y − μᵀx)², so rounding scales with the
        // size of the cancelled terms, which the offset Σ y²/2σ² bounds.
        let scale = 1.0 + rhs.abs() + problem.offset;
        worst = worst.max((lhs - rhs).abs() / scale);
        worst_residual = worst_residual.max(a).max(c);
        if (lhs - rhs).abs() > 1e-12 * scale || a != 0.0 || c != 0.0 {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(
        2,
        pass,
        "relaxed objective of the lift equals the objective, zero residuals",
        &format!(
            "max rel diff {worst:.2e}, max residual {worst_residual:.1e}, {failures}/50 failing"
        ),
    );
    assert!(pass);
}

struct SmallRun {
    exact: f64,
    outcome: RoundingOutcome,
}

/// The 20 instances shared by the lower-bound, feasibility and sandwich checks.
fn small_runs() -> &'static (Vec<SmallRun>, Duration) {
    static RUNS: OnceLock<(Vec<SmallRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let solver = SolverConfig {
            max_sweeps: 20_000,
            tolerance: 1e-4,
            ..SolverConfig::default()
        };
        let runs = (0..20u64)
            .map(|seed| {
                let (model, trace) = instance(2, 2, 5, seed);
                let (_, exact) = exact_map_viterbi(&model, &trace, false).unwrap();
                let rounding = RoundingConfig {
                    seed,
                    ..RoundingConfig::default()
                };
                let outcome = admm_rr(&model, &trace, solver, rounding, false).unwrap();
                SmallRun { exact, outcome }
            })
            .collect();
        (runs, start.elapsed())
    })
}

#[test]
fn c03_relaxation_is_a_lower_bound() {
    let (runs, elapsed) = small_runs();
    let converged: Vec<&SmallRun> = runs
        .iter()
        .filter(|r| r.outcome.relaxed.converged)
        .collect();
    let violations = converged
        .iter()
        .filter(|r| r.outcome.relaxed.objective > r.exact + 1e-3 * (1.0 + r.exact.abs()))
        .count();
    let pass = !converged.is_empty() && violations == 0 && *elapsed <= Duration::from_secs(600);
    report(
        3,
        pass,
        "relaxed objective <= exact MAP on converged instances",
        &format!(
            "{} of 20 converged, {violations} violations, {:.1} s",
            converged.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_feasible_at_convergence() {
    let (runs, _) = small_runs();
    let converged: Vec<_> = runs
        .iter()
        .filter(|r| r.outcome.relaxed.converged)
        .map(|r| r.outcome.relaxed.residuals)
        .collect();
    let bad = converged
        .iter()
        .filter(|r| r.block > 1e-4 || r.coupling > 1e-3 || r.min_eig < -1e-3 || r.min_entry < -1e-3)
        .count();
    let worst = |f: fn(&fhmm_sdp::admm::Residuals) -> f64| {
        converged.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
    };
    let pass = !converged.is_empty() && bad == 0;
    report(
        4,
        pass,
        "feasibility of converged solutions",
        &format!(
            "{} converged, {bad} infeasible; worst block {:.1e}, coupling {:.1e}, -min_eig {:.1e}, -min_entry {:.1e}",
            converged.len(),
            worst(|r| r.block),
            worst(|r| r.coupling),
            worst(|r| -r.min_eig),
            worst(|r| -r.min_entry),
        ),
    );
    assert!(pass);
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

#[test]
fn c05_psd_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_idem = 0.0f64;
    let mut beaten = 0;
    for _ in 0..100 {
        let g = normal_matrix(&mut rng, 8, 8);
        let a = (&g + g.transpose()) * 0.5;
        let p = psd_project(&a).unwrap();
        let pp = psd_project(&p).unwrap();
        worst_idem = worst_idem.max((&pp - &p).amax());
        let best = (&a - &p).norm();
        for c in 0..1000 {
            let candidate = if c % 2 == 0 {
                let r = rng.random_range(1..=8);
                let b = normal_matrix(&mut rng, 8, r);
                &b * b.transpose()
            } else {
                // Nearby PSD points.
                let e = normal_matrix(&mut rng, 8, 8) * 1e-3;
                psd_project(&(&p + (&e + e.transpose()) * 0.5)).unwrap()
            };
            if (&a - candidate).norm() < best - 1e-12 {
                beaten += 1;
            }
        }
    }
    let pass = worst_idem <= 1e-10 && beaten == 0;
    report(
        5,
        pass,
        "PSD projection is idempotent and nearest among 1000 candidates",
        &format!("max idempotence error {worst_idem:.1e}, {beaten} candidates closer"),
    );
    assert!(pass);
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn c06_sandwich_and_rounding_quality() {
    let (runs, _) = small_runs();
    let mut sandwich_violations = 0;
    let mut matches = 0;
    let mut gaps = Vec::new();
    for r in runs {
        let rr = r.outcome.objective;
        let naive = r.outcome.naive_objective;
        let tol = 1e-9 * (1.0 + r.exact.abs());
        if r.exact > rr + tol || rr > naive + tol {
            sandwich_violations += 1;
        }
        if rel_close(rr, r.exact, 1e-9) {
            matches += 1;
        }
        gaps.push((rr - r.exact) / (1.0 + r.exact.abs()));
    }
    gaps.sort_by(f64::total_cmp);
    let rate = matches as f64 / runs.len() as f64;
    let pass = sandwich_violations == 0 && rate >= 0.6;
    report(
        6,
        pass,
        "exact <= admm_rr <= naive, admm_rr optimal on >= 60%",
        &format!(
            "{sandwich_violations} sandwich violations, optimal on {matches}/{}, relative gap min {:.2e} median {:.2e} max {:.2e}",
            runs.len(),
            gaps[0],
            quantile(&gaps, 0.5),
            gaps[gaps.len() - 1]
        ),
    );
    assert!(pass);
}

#[test]
fn c07_nde_sweep() {
    let start = Instant::now();
    let config = SweepConfig::default();
    let result = nde_sweep(&config).unwrap();
    let elapsed = start.elapsed();
    let lookup = |metric: &str, x: usize| {
        result
            .points
            .iter()
            .find(|p| p.metric == metric && p.x == x as f64)
            .map(|p| p.y)
            .unwrap()
    };
    let mut detail = Vec::new();
    let mut pass = elapsed <= Duration::from_secs(1800);
    for (axis, values) in [("M", &config.appliances), ("K", &config.states)] {
        for &x in values {
            let rr = lookup(&format!("nde_admm_rr_vs_{axis}"), x);
            let naive = lookup(&format!("nde_naive_vs_{axis}"), x);
            pass &= rr <= naive;
            detail.push(format!("{axis}={x}: {rr:.4} vs {naive:.4}"));
        }
    }
    report(
        7,
        pass,
        "mean NDE of admm_rr <= naive rounding across M and K",
        &format!("{}; {:.0} s", detail.join(", "), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn c08_greedy_descent_is_monotone_and_locally_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut increases = 0;
    let mut not_local = 0;
    for seed in 0..20u64 {
        let (model, trace) = instance(3, 3, 12, 8000 + seed);
        let num_states = model.num_states();
        let obj = Objective::new(&model, &trace, EdgeMode::Off, LogZero::Penalty).unwrap();
        for _ in 0..50 {
            let start = random_states(&mut rng, trace.len(), &num_states);
            let out = greedy_descent(&model, &trace, &start, false).unwrap();
            let before = obj.total(&start);
            let after = obj.total(&out);
            if after > before + 1e-9 * (1.0 + before.abs()) {
                increases += 1;
            }
            let mut flipped = out.clone();
            'scan: for t in 0..out.len() {
                for (i, &k) in num_states.iter().enumerate() {
                    for s in 0..k {
                        if s == out.get(t, i) {
                            continue;
                        }
                        flipped.set(t, i, s);
                        let value = obj.total(&flipped);
                        flipped.set(t, i, out.get(t, i));
                        if value < after - 1e-9 * (1.0 + after.abs()) {
                            not_local += 1;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    let pass = increases == 0 && not_local == 0;
    report(
        8,
        pass,
        "greedy descent never increases the objective and ends single-flip optimal",
        &format!("1000 starts: {increases} increases, {not_local} improvable"),
    );
    assert!(pass);
}

#[test]
fn c09_supervised_learning_recovers_parameters() {
    let mut worst_level = 0.0f64;
    let mut worst_diag = 0.0f64;
    let mut failures = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let on = rng.random_range(500.0..3000.0);
        let sigma = on / (10.0 * rng.random_range(1.5..4.0));
        let p00 = rng.random_range(0.85..0.98);
        let p11 = rng.random_range(0.8..0.97);
        let truth = ApplianceHmm::new(
            vec![0.0, on],
            vec![vec![p00, 1.0 - p00], vec![1.0 - p11, p11]],
        );
        let model = FhmmModel::new(vec![truth.clone()], sigma, sigma).with_default_initial();
        let (_, trace) = simulate(&model, 5000, seed).unwrap();
        let fitted = fit_supervised(&trace.aggregate, 2, &LearnConfig::default())
            .unwrap()
            .appliance;
        let level_err = (0..2)
            .map(|s| (fitted.power_levels[s] - truth.power_levels[s]).abs() / on)
            .fold(0.0, f64::max);
        let diag_err = (0..2)
            .map(|s| (fitted.transition[s][s] - truth.transition[s][s]).abs())
            .fold(0.0, f64::max);
        worst_level = worst_level.max(level_err);
        worst_diag = worst_diag.max(diag_err);
        if level_err > 0.05 || diag_err > 0.05 {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(
        9,
        pass,
        "fit_supervised recovers levels within 5% and diagonals within 0.05",
        &format!(
            "worst level error {:.2}%, worst diagonal error {worst_diag:.4}",
            worst_level * 100.0
        ),
    );
    assert!(pass);
}

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_fhmm-sdp"))
        .current_dir(dir)
        .args(args)
        .env("FHMM_SDP_THREADS", "2")
        .status()
        .unwrap();
    assert!(status.success(), "fhmm-sdp {args:?} failed with {status}");
}

fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let steps: [&[&str]; 8] = [
        &[
            "gen-model",
            "-M",
            "2",
            "-K",
            "2",
            "-T",
            "40",
            "--seed",
            "7",
            "-o",
            "model.json",
        ],
        &[
            "simulate",
            "--model",
            "model.json",
            "-T",
            "40",
            "--seed",
            "3",
            "-o",
            "trace.csv",
            "--states-out",
            "truth.csv",
            "--labeled-out",
            "labeled.csv",
        ],
        &[
            "infer",
            "--model",
            "model.json",
            "--trace",
            "trace.csv",
            "--method",
            "admm-rr",
            "--max-sweeps",
            "300",
            "--trigger-period",
            "100",
            "--seed",
            "5",
            "-o",
            "rr.csv",
            "--residual-log",
            "residuals.csv",
            "--diagnostics",
            "diag.json",
        ],
        &[
            "infer",
            "--model",
            "model.json",
            "--trace",
            "trace.csv",
            "--method",
            "admm",
            "--max-sweeps",
            "300",
            "-o",
            "naive.csv",
        ],
        &[
            "infer-exact",
            "--model",
            "model.json",
            "--trace",
            "trace.csv",
            "-o",
            "exact.csv",
        ],
        &[
            "evaluate",
            "--model",
            "model.json",
            "--trace",
            "trace.csv",
            "--states",
            "rr.csv",
            "--truth-states",
            "truth.csv",
            "-o",
            "eval.json",
            "--table",
            "eval.txt",
        ],
        &[
            "fit",
            "--labeled",
            "labeled.csv",
            "-K",
            "2",
            "-o",
            "fitted.json",
        ],
        &[
            "dump-problem",
            "--model",
            "model.json",
            "--trace",
            "trace.csv",
            "-o",
            "problem.jsonl",
        ],
    ];
    for args in steps {
        run_cli(dir, args);
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let mut bytes = std::fs::read(&path).unwrap();
        if name.ends_with(".manifest.json") {
            let mut manifest: Value = serde_json::from_slice(&bytes).unwrap();
            manifest.as_object_mut().unwrap().remove("timings_ms");
            bytes = serde_json::to_vec(&manifest).unwrap();
        }
        files.insert(name, bytes);
    }
    for name in files.keys() {
        std::fs::remove_file(dir.join(name)).unwrap();
    }
    files
}

#[test]
fn c10_cli_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline(dir.path());
    let second = pipeline(dir.path());
    let differing: Vec<&String> = first
        .keys()
        .filter(|name| first.get(*name) != second.get(*name))
        .collect();
    let manifests = first
        .keys()
        .filter(|n| n.ends_with(".manifest.json"))
        .count();
    let pass = first.len() == second.len() && differing.is_empty() && manifests >= 8;
    report(
        10,
        pass,
        "CLI reruns give byte-identical outputs",
        &format!(
            "{} files, {manifests} manifests, differing: {differing:?}",
            first.len()
        ),
    );
    assert!(pass);
}
