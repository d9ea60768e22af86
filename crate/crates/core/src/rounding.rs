//! Randomized rounding of the relaxed solution (ADMM-RR) and the naive
//! argmax baseline.
//!
//! Each snapshot of the solver is rounded by sweeping windows of three
//! consecutive steps: sample `z = x + Lw` from the window Gaussian, round
//! every appliance block to its argmax, keep the sample with the smallest
//! window objective, then finish with greedy single-flip descent.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{AdmmSolver, RelaxedSolution, Residuals, SolverConfig};
use crate::error::{FhmmError, Result};
use crate::model::{
    check_dims, EdgeMode, FhmmModel, LogZero, Objective, ObservationTrace, StateSequence,
};
use crate::relaxation::{build, LiftedPoint};

/// Environment variable capping the sampling workers; `0` or unset means
/// one per core.
pub const THREADS_ENV: &str = "FHMM_SDP_THREADS";

/// A move must lower the objective by more than this to be taken.
pub const GREEDY_MIN_DECREASE: f64 = 1e-12;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingConfig {
    /// Gaussian samples drawn per window.
    pub samples_per_window: usize,
    /// Solver sweeps between rounding snapshots.
    pub trigger_period: usize,
    pub seed: u64,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self {
            samples_per_window: 100,
            trigger_period: 250,
            seed: 0,
        }
    }
}

impl RoundingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_window == 0 || self.trigger_period == 0 {
            return Err(FhmmError::InvalidInput(format!(
                "rounding counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-appliance argmax of a stacked indicator vector; ties go to the
/// lowest state index.
pub fn round_one_hot(x: &[f64], num_states: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(num_states.len());
    let mut offset = 0;
    for &k in num_states {
        let block = &x[offset..offset + k];
        let mut best = 0;
        for (s, &v) in block.iter().enumerate() {
            if v > block[best] {
                best = s;
            }
        }
        out.push(best);
        offset += k;
    }
    out
}

fn one_hot(row: &[usize], num_states: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; num_states.iter().sum()];
    let mut offset = 0;
    for (&s, &k) in row.iter().zip(num_states) {
        out[offset + s] = 1.0;
        offset += k;
    }
    out
}

/// Argmax rounding of every `x*_t` of a lifted point.
pub fn naive_round_point(point: &LiftedPoint, num_states: &[usize]) -> StateSequence {
    let rows = point
        .blocks
        .iter()
        .map(|b| round_one_hot(&b.x(), num_states))
        .collect::<Vec<_>>();
    rows_to_sequence(rows, num_states.len())
}

pub fn naive_round(solution: &RelaxedSolution, num_states: &[usize]) -> StateSequence {
    naive_round_point(&solution.point, num_states)
}

fn rows_to_sequence(rows: Vec<Vec<usize>>, num_appliances: usize) -> StateSequence {
    let mut seq = StateSequence::zeros(rows.len(), num_appliances);
    for (t, row) in rows.iter().enumerate() {
        for (i, &s) in row.iter().enumerate() {
            seq.set(t, i, s);
        }
    }
    seq
}

/// Objective terms that depend on the states at `center − 1 ..= center + 1`
/// (0-based, `1 ≤ center ≤ T − 2`).
pub fn window_objective(
    model: &FhmmModel,
    trace: &ObservationTrace,
    states: &StateSequence,
    center: usize,
    edges: impl Into<EdgeMode>,
) -> Result<f64> {
    check_dims(model, trace, states)?;
    if center == 0 || center + 1 >= trace.len() {
        return Err(FhmmError::InvalidInput(format!(
            "window center {center} needs both neighbours in a trace of length {}",
            trace.len()
        )));
    }
    let obj = Objective::new(model, trace, edges.into(), LogZero::Infinite)?;
    Ok(obj.window(states, center))
}

/// How the window covariance was factored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "jitter", rename_all = "snake_case")]
pub enum Factorization {
    Cholesky,
    Jitter(f64),
    /// Standard deviations only.
    Diagonal,
}

/// Gaussian over three consecutive steps.
#[derive(Debug, Clone)]
pub struct RoundingWindow {
    pub center: usize,
    /// `[x_{c−1}; x_c; x_{c+1}]`.
    pub mean: DVector<f64>,
    /// `blockdiag(X_{c−1}, X_c, X_{c+1}) − x xᵀ`, symmetrized.
    pub covariance: DMatrix<f64>,
    /// Lower-triangular `L` with `LLᵀ ≈ Σ`.
    pub factor: DMatrix<f64>,
    pub factorization: Factorization,
}

impl RoundingWindow {
    pub fn assemble(center: usize, x: [&[f64]; 3], big_x: [&DMatrix<f64>; 3]) -> Self {
        let n = x[0].len();
        let mean = DVector::from_iterator(3 * n, x.iter().flat_map(|v| v.iter().copied()));
        let mut cov = -(&mean * mean.transpose());
        for (s, block) in big_x.iter().enumerate() {
            let mut view = cov.view_mut((s * n, s * n), (n, n));
            view += *block;
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let (factor, factorization) = factor_covariance(&cov);
        Self {
            center,
            mean,
            covariance: cov,
            factor,
            factorization,
        }
    }

    /// Draws one sample and rounds each `(slice, appliance)` block to one-hot.
    pub fn sample_round<R: Rng>(&self, rng: &mut R, num_states: &[usize]) -> [Vec<usize>; 3] {
        let dim = self.mean.len();
        let w = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let z = &self.mean + &self.factor * w;
        let n = dim / 3;
        let slice = |s: usize| round_one_hot(&z.as_slice()[s * n..(s + 1) * n], num_states);
        [slice(0), slice(1), slice(2)]
    }
}

fn factor_covariance(cov: &DMatrix<f64>) -> (DMatrix<f64>, Factorization) {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return (ch.l(), Factorization::Cholesky);
    }
    let dim = cov.nrows();
    let mut eps = JITTER_START;
    while eps <= JITTER_MAX * (1.0 + 1e-9) {
        let jittered = cov + DMatrix::identity(dim, dim) * eps;
        if let Some(ch) = Cholesky::new(jittered) {
            return (ch.l(), Factorization::Jitter(eps));
        }
        eps *= 10.0;
    }
    let diag = DVector::from_iterator(dim, cov.diagonal().iter().map(|v| v.max(0.0).sqrt()));
    (DMatrix::from_diagonal(&diag), Factorization::Diagonal)
}

/// Independent stream for one sample: the result does not depend on how
/// samples are spread over workers.
pub fn sample_rng(seed: u64, snapshot: usize, center: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((snapshot as u64) << 32) | center as u64);
    rng.set_word_pos((sample as u128) << 40);
    rng
}

/// Single-flip descent from `states`.
pub fn greedy_descent(
    model: &FhmmModel,
    trace: &ObservationTrace,
    states: &StateSequence,
    edges: impl Into<EdgeMode>,
) -> Result<StateSequence> {
    check_dims(model, trace, states)?;
    let obj = Objective::new(model, trace, edges.into(), LogZero::Penalty)?;
    Ok(descend(&obj, states.clone()))
}

/// Scans `(t, i, state)` in lexicographic order and takes every strictly
/// improving flip as it is found, until a full pass finds none.
fn descend(obj: &Objective, mut states: StateSequence) -> StateSequence {
    let num_states = obj.num_states().to_vec();
    loop {
        let mut moved = false;
        for t in 0..states.len() {
            for (i, &k) in num_states.iter().enumerate() {
                for s in 0..k {
                    let current = states.get(t, i);
                    if s == current {
                        continue;
                    }
                    let before = obj.local(&states, t, i, current);
                    let after = obj.local(&states, t, i, s);
                    if before - after > GREEDY_MIN_DECREASE {
                        states.set(t, i, s);
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            return states;
        }
    }
}

/// Counters from rounding one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowStats {
    pub windows: usize,
    pub jitter: usize,
    pub diagonal_fallbacks: usize,
}

/// Window sweep plus greedy descent on one relaxed point.
pub fn round_point(
    obj: &Objective,
    point: &LiftedPoint,
    config: &RoundingConfig,
    snapshot: usize,
) -> (StateSequence, WindowStats) {
    let num_states = obj.num_states().to_vec();
    let len = point.blocks.len();
    let mut xs: Vec<Vec<f64>> = point.blocks.iter().map(|b| b.x()).collect();
    let mut bigs: Vec<DMatrix<f64>> = point.blocks.iter().map(|b| b.big_x()).collect();
    let mut states = naive_round_point(point, &num_states);
    let mut stats = WindowStats::default();

    for c in 1..len.saturating_sub(1) {
        let window = RoundingWindow::assemble(
            c,
            [&xs[c - 1], &xs[c], &xs[c + 1]],
            [&bigs[c - 1], &bigs[c], &bigs[c + 1]],
        );
        stats.windows += 1;
        match window.factorization {
            Factorization::Cholesky => {}
            Factorization::Jitter(_) => stats.jitter += 1,
            Factorization::Diagonal => stats.diagonal_fallbacks += 1,
        }
        let base = &states;
        let scored: Vec<(f64, [Vec<usize>; 3])> = (0..config.samples_per_window)
            .into_par_iter()
            .map(|k| {
                let mut rng = sample_rng(config.seed, snapshot, c, k);
                let frag = window.sample_round(&mut rng, &num_states);
                let mut trial = base.clone();
                for (s, row) in frag.iter().enumerate() {
                    for (i, &v) in row.iter().enumerate() {
                        trial.set(c - 1 + s, i, v);
                    }
                }
                (obj.window(&trial, c), frag)
            })
            .collect();
        // first sample attaining the minimum, as a sequential scan would keep
        let mut best: Option<&(f64, [Vec<usize>; 3])> = None;
        for cand in &scored {
            if best.is_none_or(|b| b.0 > cand.0) {
                best = Some(cand);
            }
        }
        if let Some((_, frag)) = best {
            let centre = &frag[1];
            for (i, &v) in centre.iter().enumerate() {
                states.set(c, i, v);
            }
            let hot = DVector::from_vec(one_hot(centre, &num_states));
            bigs[c] = &hot * hot.transpose();
            xs[c] = hot.as_slice().to_vec();
        }
    }
    (descend(obj, states), stats)
}

/// One rounding snapshot in the diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub sweep: usize,
    pub naive_objective: f64,
    pub rounded_objective: f64,
    #[serde(flatten)]
    pub stats: WindowStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundingDiagnostics {
    pub snapshots: Vec<SnapshotRecord>,
    /// Index into `snapshots` of the returned candidate.
    pub chosen_snapshot: usize,
    /// Whether the returned candidate is the naive rounding of its snapshot.
    pub chosen_naive: bool,
    pub relaxed_objective: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub residuals: Residuals,
    pub diagonal_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct RoundingOutcome {
    pub states: StateSequence,
    /// Full objective of `states`.
    pub objective: f64,
    /// Naive rounding of the final relaxed solution.
    pub naive_states: StateSequence,
    pub naive_objective: f64,
    pub relaxed: RelaxedSolution,
    pub diagnostics: RoundingDiagnostics,
}

/// Workers for sample fan-out, from [`THREADS_ENV`].
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Solves the relaxation and rounds a snapshot every `trigger_period`
/// sweeps and at the end; returns the candidate with the smallest objective.
pub fn admm_rr(
    model: &FhmmModel,
    trace: &ObservationTrace,
    solver_config: SolverConfig,
    config: RoundingConfig,
    edges: impl Into<EdgeMode>,
) -> Result<RoundingOutcome> {
    config.validate()?;
    let edges = edges.into();
    let problem = build(model, trace, edges)?;
    let search = Objective::new(model, trace, edges, LogZero::Penalty)?;
    let exact = Objective::new(model, trace, edges, LogZero::Infinite)?;
    let num_states = model.num_states();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(configured_threads())
        .build()
        .map_err(|e| FhmmError::InvalidInput(format!("thread pool: {e}")))?;

    struct Candidate {
        states: StateSequence,
        score: f64,
        snapshot: usize,
        naive: bool,
    }
    let mut records: Vec<SnapshotRecord> = Vec::new();
    let mut best: Option<Candidate> = None;
    let mut consider = |point: &LiftedPoint, sweep: usize, records: &mut Vec<SnapshotRecord>| {
        let index = records.len();
        let naive = naive_round_point(point, &num_states);
        let (rounded, stats) = pool.install(|| round_point(&search, point, &config, index));
        let naive_score = search.total(&naive);
        let rounded_score = search.total(&rounded);
        records.push(SnapshotRecord {
            sweep,
            naive_objective: exact.total(&naive),
            rounded_objective: exact.total(&rounded),
            stats,
        });
        for (states, score, is_naive) in
            [(naive, naive_score, true), (rounded, rounded_score, false)]
        {
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(Candidate {
                    states,
                    score,
                    snapshot: index,
                    naive: is_naive,
                });
            }
        }
    };

    let mut solver = AdmmSolver::new(&problem, solver_config)?;
    let mut snapshots = Vec::new();
    let relaxed = solver.run_with(|s| {
        if s.sweeps() % config.trigger_period == 0 {
            snapshots.push((s.recover(), s.sweeps()));
        }
        Ok(())
    })?;
    // Rounding is deferred so the solver callback stays cheap to borrow.
    for (point, sweep) in &snapshots {
        consider(point, *sweep, &mut records);
    }
    if snapshots
        .last()
        .is_none_or(|(_, sweep)| *sweep != relaxed.sweeps)
    {
        consider(&relaxed.point, relaxed.sweeps, &mut records);
    }

    let chosen = best.ok_or_else(|| FhmmError::Undefined("no rounding candidate".into()))?;
    let naive_states = naive_round(&relaxed, &num_states);
    let naive_objective = exact.total(&naive_states);
    let diagnostics = RoundingDiagnostics {
        diagonal_fallbacks: records.iter().map(|r| r.stats.diagonal_fallbacks).sum(),
        snapshots: records,
        chosen_snapshot: chosen.snapshot,
        chosen_naive: chosen.naive,
        relaxed_objective: relaxed.objective,
        converged: relaxed.converged,
        sweeps: relaxed.sweeps,
        residuals: relaxed.residuals,
    };
    Ok(RoundingOutcome {
        objective: exact.total(&chosen.states),
        states: chosen.states,
        naive_states,
        naive_objective,
        relaxed,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_map_viterbi;
    use crate::model::{objective, simulate, ApplianceHmm};
    use crate::relaxation::lift;

    fn two_state(mu: f64) -> ApplianceHmm {
        ApplianceHmm::new(vec![0.0, mu], vec![vec![0.9, 0.1], vec![0.2, 0.8]])
    }

    fn instance(seed: u64, len: usize) -> (FhmmModel, ObservationTrace) {
        let model = FhmmModel::new(vec![two_state(100.0), two_state(260.0)], 20.0, 20.0);
        let (_, trace) = simulate(&model, len, seed).unwrap();
        (model, trace)
    }

    #[test]
    fn naive_round_examples() {
        assert_eq!(round_one_hot(&[0.9, 0.1], &[2]), vec![0]);
        assert_eq!(round_one_hot(&[0.5, 0.5], &[2]), vec![0]);
        assert_eq!(
            round_one_hot(&[0.2, 0.3, 0.5, 0.6, 0.4], &[3, 2]),
            vec![2, 0]
        );
        let states = StateSequence::from_rows(vec![vec![1, 0], vec![0, 2]], &[2, 3]).unwrap();
        let point = lift(&states, &[2, 3]);
        assert_eq!(naive_round_point(&point, &[2, 3]), states);
    }

    #[test]
    fn window_covers_whole_trace_of_three() {
        let (model, trace) = instance(1, 3);
        let states =
            StateSequence::from_rows(vec![vec![0, 1], vec![1, 1], vec![1, 0]], &[2, 2]).unwrap();
        let w = window_objective(&model, &trace, &states, 1, true).unwrap();
        assert_eq!(w, objective(&model, &trace, &states, true).unwrap());
        assert!(window_objective(&model, &trace, &states, 0, false).is_err());
        assert!(window_objective(&model, &trace, &states, 2, false).is_err());
    }

    #[test]
    fn window_tracks_full_objective_changes() {
        let (model, trace) = instance(2, 8);
        let base = StateSequence::zeros(8, 2);
        let mut changed = base.clone();
        changed.set(3, 0, 1);
        changed.set(4, 1, 1);
        changed.set(5, 0, 1);
        let full = |s: &StateSequence| objective(&model, &trace, s, true).unwrap();
        let win = |s: &StateSequence| window_objective(&model, &trace, s, 4, true).unwrap();
        let df = full(&changed) - full(&base);
        let dw = win(&changed) - win(&base);
        assert!((df - dw).abs() < 1e-9 * (1.0 + df.abs()));
    }

    #[test]
    fn window_hand_evaluation() {
        let app = ApplianceHmm::new(vec![0.0, 100.0], vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        let model = FhmmModel::new(vec![app], 10.0, 10.0);
        let trace = ObservationTrace::new(vec![0.0, 100.0, 90.0, 0.0, 0.0]);
        let states =
            StateSequence::from_rows(vec![vec![0], vec![1], vec![1], vec![0], vec![0]], &[2])
                .unwrap();
        // center 2 (0-based): quadratics at 1, 2, 3 and transitions 0→1 .. 3→4
        let quad = 0.0 + 100.0 / 200.0 + 0.0;
        let trans = -(0.1f64.ln()) - 0.8f64.ln() - 0.2f64.ln() - 0.9f64.ln();
        let w = window_objective(&model, &trace, &states, 2, false).unwrap();
        assert!((w - (quad + trans)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariance_samples_the_mean() {
        let x = [0.2, 0.8, 1.0, 0.0];
        let outer = DMatrix::from_fn(4, 4, |i, j| x[i] * x[j]);
        let window = RoundingWindow::assemble(1, [&x, &x, &x], [&outer, &outer, &outer]);
        let mut rng = sample_rng(5, 0, 1, 0);
        for _ in 0..20 {
            let frag = window.sample_round(&mut rng, &[2, 2]);
            assert!(frag.iter().all(|row| row == &vec![1, 0]), "{frag:?}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let x = [0.5, 0.5];
        let big = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5]));
        let window = RoundingWindow::assemble(1, [&x, &x, &x], [&big, &big, &big]);
        let draw = |seed| {
            let mut rng = sample_rng(seed, 0, 1, 3);
            (0..10)
                .map(|_| window.sample_round(&mut rng, &[2]))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert!(draw(9)
            .iter()
            .flatten()
            .all(|row| row.len() == 1 && row[0] < 2));
    }

    #[test]
    fn greedy_keeps_exact_optimum_and_never_increases() {
        for seed in 0..10 {
            let (model, trace) = instance(seed, 6);
            let (best, value) = exact_map_viterbi(&model, &trace, false).unwrap();
            let out = greedy_descent(&model, &trace, &best, false).unwrap();
            assert_eq!(out, best);
            let start = StateSequence::from_rows(vec![vec![1, 1]; 6], &[2, 2]).unwrap();
            let before = objective(&model, &trace, &start, false).unwrap();
            let after = greedy_descent(&model, &trace, &start, false).unwrap();
            let after_value = objective(&model, &trace, &after, false).unwrap();
            assert!(after_value <= before);
            assert!(after_value >= value);
        }
    }

    #[test]
    fn short_traces_fall_back_to_naive_plus_greedy() {
        let (model, trace) = instance(3, 2);
        let solver = SolverConfig {
            max_sweeps: 300,
            ..SolverConfig::default()
        };
        let out = admm_rr(&model, &trace, solver, RoundingConfig::default(), false).unwrap();
        assert!(out
            .diagnostics
            .snapshots
            .iter()
            .all(|s| s.stats.windows == 0));
        let greedy = greedy_descent(&model, &trace, &out.naive_states, false).unwrap();
        let greedy_value = objective(&model, &trace, &greedy, false).unwrap();
        assert!(out.objective <= greedy_value);
        assert!(out.objective <= out.naive_objective);
    }

    #[test]
    fn admm_rr_is_deterministic() {
        let (model, trace) = instance(4, 6);
        let solver = SolverConfig {
            max_sweeps: 500,
            tolerance: 1e-12,
            ..SolverConfig::default()
        };
        let cfg = RoundingConfig {
            samples_per_window: 20,
            trigger_period: 100,
            seed: 3,
        };
        let a = admm_rr(&model, &trace, solver, cfg, false).unwrap();
        let b = admm_rr(&model, &trace, solver, cfg, false).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert_eq!(a.diagnostics.snapshots.len(), 5);
    }
}
