//! The additive factorial HMM, its simulator and the MAP objective.
//!
//! Each appliance is a discrete Markov chain with a power level per state.
//! The aggregate observation is the sum of the active levels plus Gaussian
//! noise. MAP inference minimizes
//!
//! ```text
//! f(x) = Σ_t (y_t − Σ_i μ_iᵀ x_{t,i})² / 2σ²  +  Σ_t Σ_i x_{t,i}ᵀ C_{t,i} x_{t+1,i}
//! ```
//!
//! with `C_{t,i} = −log P_i` and, when the edge term is enabled,
//! `C_{t,i} = E_{t,i} − log P_i` where `E_{t,i}` scores how well the observed
//! change in aggregate power matches the appliance's level change.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};

/// Finite stand-in for `−log 0` inside solver data.
pub const FORBIDDEN_PENALTY: f64 = 1e12;

const STOCHASTIC_TOL: f64 = 1e-9;

/// One appliance: a `K`-state Markov chain with a power level per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceHmm {
    #[serde(rename = "mu")]
    pub power_levels: Vec<f64>,
    #[serde(rename = "P")]
    pub transition: Vec<Vec<f64>>,
    /// Per-state emission noise used only by the synthetic data generator.
    #[serde(
        rename = "state_sigma",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub state_noise: Option<Vec<f64>>,
}

impl ApplianceHmm {
    pub fn new(power_levels: Vec<f64>, transition: Vec<Vec<f64>>) -> Self {
        Self {
            power_levels,
            transition,
            state_noise: None,
        }
    }

    pub fn num_states(&self) -> usize {
        self.power_levels.len()
    }

    /// `Δμ_{m,k} = μ_k − μ_m`, the level change of a transition `m → k`.
    pub fn level_change(&self, from: usize, to: usize) -> f64 {
        self.power_levels[to] - self.power_levels[from]
    }

    fn validate(&self, index: usize) -> Result<()> {
        let k = self.num_states();
        if k < 2 {
            return Err(FhmmError::InvalidModel(format!(
                "appliance {index}: needs at least 2 states, got {k}"
            )));
        }
        for (s, &mu) in self.power_levels.iter().enumerate() {
            if !mu.is_finite() || mu < 0.0 {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {index}, state {s}: power level must be finite and >= 0, got {mu}"
                )));
            }
        }
        if self.transition.len() != k {
            return Err(FhmmError::InvalidModel(format!(
                "appliance {index}: transition matrix has {} rows, expected {k}",
                self.transition.len()
            )));
        }
        for (row_idx, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {index}, row {row_idx}: expected {k} entries, got {}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {index}, row {row_idx}: probability {bad} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {index}, row {row_idx}: row not stochastic (sums to {sum})"
                )));
            }
        }
        if let Some(noise) = &self.state_noise {
            if noise.len() != k || noise.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {index}: state_sigma must hold {k} finite non-negative values"
                )));
            }
        }
        Ok(())
    }
}

/// The additive FHMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhmmModel {
    pub appliances: Vec<ApplianceHmm>,
    pub sigma: f64,
    pub sigma_diff: f64,
    /// Per-appliance initial state distribution. Only the simulator uses it;
    /// the MAP objective carries no initial-state term.
    #[serde(rename = "initial", default)]
    pub initial_dist: Vec<Vec<f64>>,
}

impl FhmmModel {
    /// Builds a model with uniform initial distributions.
    pub fn new(appliances: Vec<ApplianceHmm>, sigma: f64, sigma_diff: f64) -> Self {
        let initial_dist = appliances
            .iter()
            .map(|a| vec![1.0 / a.num_states() as f64; a.num_states()])
            .collect();
        Self {
            appliances,
            sigma,
            sigma_diff,
            initial_dist,
        }
    }

    pub fn num_appliances(&self) -> usize {
        self.appliances.len()
    }

    pub fn num_states(&self) -> Vec<usize> {
        self.appliances
            .iter()
            .map(ApplianceHmm::num_states)
            .collect()
    }

    /// `n = Σ_i K_i`.
    pub fn total_states(&self) -> usize {
        self.appliances.iter().map(ApplianceHmm::num_states).sum()
    }

    /// Fills in uniform initial distributions when none were given.
    pub fn with_default_initial(mut self) -> Self {
        if self.initial_dist.is_empty() {
            self.initial_dist = self
                .appliances
                .iter()
                .map(|a| vec![1.0 / a.num_states() as f64; a.num_states()])
                .collect();
        }
        self
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.appliances.is_empty() {
            return Err(FhmmError::InvalidModel("model has no appliances".into()));
        }
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(FhmmError::InvalidModel(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.sigma_diff <= 0.0 || !self.sigma_diff.is_finite() {
            return Err(FhmmError::InvalidModel(format!(
                "sigma_diff must be positive, got {}",
                self.sigma_diff
            )));
        }
        for (i, app) in self.appliances.iter().enumerate() {
            app.validate(i)?;
        }
        if self.initial_dist.len() != self.appliances.len() {
            return Err(FhmmError::InvalidModel(format!(
                "initial distribution given for {} appliances, model has {}",
                self.initial_dist.len(),
                self.appliances.len()
            )));
        }
        for (i, (dist, app)) in self.initial_dist.iter().zip(&self.appliances).enumerate() {
            if dist.len() != app.num_states() || dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {i}: initial distribution must hold {} probabilities",
                    app.num_states()
                )));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(FhmmError::InvalidModel(format!(
                    "appliance {i}: initial distribution not stochastic (sums to {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// How the edge-matching term enters the transition cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// `C = −log P`.
    #[default]
    Off,
    /// `C = E − log P`: the edge cost is a negative log-likelihood and is added.
    On,
    /// `C = −E − log P`: the edge cost enters with a negative sign.
    Subtracted,
}

impl EdgeMode {
    pub fn enabled(self) -> bool {
        !matches!(self, EdgeMode::Off)
    }

    fn sign(self) -> f64 {
        match self {
            EdgeMode::Off => 0.0,
            EdgeMode::On => 1.0,
            EdgeMode::Subtracted => -1.0,
        }
    }
}

impl From<bool> for EdgeMode {
    fn from(use_edges: bool) -> Self {
        if use_edges {
            EdgeMode::On
        } else {
            EdgeMode::Off
        }
    }
}

/// Per-time, per-appliance state indices (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateSequence {
    num_appliances: usize,
    states: Vec<usize>,
}

impl StateSequence {
    /// Builds a sequence from per-time rows, checking ranges against `num_states`.
    pub fn from_rows(rows: Vec<Vec<usize>>, num_states: &[usize]) -> Result<Self> {
        let m = num_states.len();
        let mut states = Vec::with_capacity(rows.len() * m);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(FhmmError::Dimension(format!(
                    "time {t}: expected {m} appliance states, got {}",
                    row.len()
                )));
            }
            for (i, (&s, &k)) in row.iter().zip(num_states).enumerate() {
                if s >= k {
                    return Err(FhmmError::InvalidInput(format!(
                        "time {t}, appliance {i}: state {s} out of range (K = {k})"
                    )));
                }
            }
            states.extend_from_slice(row);
        }
        Ok(Self {
            num_appliances: m,
            states,
        })
    }

    /// All appliances in state 0 for `len` steps.
    pub fn zeros(len: usize, num_appliances: usize) -> Self {
        Self {
            num_appliances,
            states: vec![0; len * num_appliances],
        }
    }

    pub fn len(&self) -> usize {
        self.states
            .len()
            .checked_div(self.num_appliances)
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_appliances(&self) -> usize {
        self.num_appliances
    }

    pub fn get(&self, t: usize, i: usize) -> usize {
        self.states[t * self.num_appliances + i]
    }

    pub fn set(&mut self, t: usize, i: usize, state: usize) {
        self.states[t * self.num_appliances + i] = state;
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.states[t * self.num_appliances..(t + 1) * self.num_appliances]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.states.chunks(self.num_appliances.max(1))
    }

    /// The stacked one-hot vector `x_t = [x_{t,1}; …; x_{t,M}]`.
    pub fn one_hot(&self, t: usize, num_states: &[usize]) -> Vec<f64> {
        let n: usize = num_states.iter().sum();
        let mut x = vec![0.0; n];
        let mut offset = 0;
        for (i, &k) in num_states.iter().enumerate() {
            x[offset + self.get(t, i)] = 1.0;
            offset += k;
        }
        x
    }

    /// Per-appliance power `μ_{i, s_{t,i}}` as a `T × M` matrix.
    pub fn reconstruct(&self, model: &FhmmModel) -> Vec<Vec<f64>> {
        self.rows()
            .map(|row| {
                row.iter()
                    .zip(&model.appliances)
                    .map(|(&s, app)| app.power_levels[s])
                    .collect()
            })
            .collect()
    }

    /// Checks the sequence against a model's state counts.
    pub fn check(&self, num_states: &[usize]) -> Result<()> {
        if self.num_appliances != num_states.len() {
            return Err(FhmmError::Dimension(format!(
                "state sequence has {} appliances, model has {}",
                self.num_appliances,
                num_states.len()
            )));
        }
        for (t, row) in self.rows().enumerate() {
            for (i, (&s, &k)) in row.iter().zip(num_states).enumerate() {
                if s >= k {
                    return Err(FhmmError::InvalidInput(format!(
                        "time {t}, appliance {i}: state {s} out of range (K = {k})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Aggregate power and, optionally, per-appliance ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTrace {
    pub aggregate: Vec<f64>,
    /// `T × M`, row per time step.
    pub per_appliance: Option<Vec<Vec<f64>>>,
}

impl ObservationTrace {
    pub fn new(aggregate: Vec<f64>) -> Self {
        Self {
            aggregate,
            per_appliance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }

    /// Restricts the trace to the half-open time range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            aggregate: self.aggregate[range.clone()].to_vec(),
            per_appliance: self.per_appliance.as_ref().map(|p| p[range].to_vec()),
        }
    }
}

/// Samples a state path and an observation trace.
///
/// Chains evolve independently from `initial_dist` through `P_i`; the
/// aggregate is the noiseless sum plus `N(0, σ²)`.
pub fn simulate(
    model: &FhmmModel,
    len: usize,
    seed: u64,
) -> Result<(StateSequence, ObservationTrace)> {
    if len == 0 {
        return Err(FhmmError::InvalidInput(
            "simulation length T must be >= 1".into(),
        ));
    }
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = sample_states(model, len, &mut rng);
    let per_appliance = states.reconstruct(model);
    let noise = Normal::new(0.0, model.sigma)
        .map_err(|e| FhmmError::InvalidModel(format!("sigma: {e}")))?;
    let aggregate = per_appliance
        .iter()
        .map(|row| row.iter().sum::<f64>() + noise.sample(&mut rng))
        .collect();
    Ok((
        states,
        ObservationTrace {
            aggregate,
            per_appliance: Some(per_appliance),
        },
    ))
}

pub(crate) fn sample_states<R: Rng>(model: &FhmmModel, len: usize, rng: &mut R) -> StateSequence {
    let m = model.num_appliances();
    let mut seq = StateSequence::zeros(len, m);
    for (i, app) in model.appliances.iter().enumerate() {
        let mut s = sample_categorical(&model.initial_dist[i], rng);
        seq.set(0, i, s);
        for t in 1..len {
            s = sample_categorical(&app.transition[s], rng);
            seq.set(t, i, s);
        }
    }
    seq
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return s;
        }
    }
    // Rounding left a sliver above the cumulative sum: take the last state
    // that has mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Edge-matching costs `E_{t,i}` for `t ∈ [0, T−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCost {
    /// Indexed `[t][i]`; entry `(m, k)` scores the transition `m → k`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
}

impl EdgeCost {
    pub fn get(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.blocks[t][i]
    }
}

/// `(E_{t,i})_{m,k} = (Δy_t − Δμ^{(i)}_{m,k})² / (2σ_diff²)` with `Δy_t = y_{t+1} − y_t`.
pub fn edge_costs(model: &FhmmModel, trace: &ObservationTrace) -> Result<EdgeCost> {
    let len = trace.len();
    if len < 2 {
        return Err(FhmmError::InvalidInput(
            "edge costs need at least two time steps".into(),
        ));
    }
    let inv = 1.0 / (2.0 * model.sigma_diff * model.sigma_diff);
    let blocks = (0..len - 1)
        .map(|t| {
            let dy = trace.aggregate[t + 1] - trace.aggregate[t];
            model
                .appliances
                .iter()
                .map(|app| {
                    let k = app.num_states();
                    DMatrix::from_fn(k, k, |from, to| {
                        let r = dy - app.level_change(from, to);
                        r * r * inv
                    })
                })
                .collect()
        })
        .collect();
    Ok(EdgeCost { blocks })
}

/// How `−log 0` is represented when assembling transition costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogZero {
    Infinite,
    Penalty,
}

/// Precomputed terms of the MAP objective for one `(model, trace)` pair.
///
/// Shared by the exact oracle, the rounding window search and greedy
/// descent so every consumer sums the same terms in the same order.
#[derive(Debug, Clone)]
pub struct Objective {
    levels: Vec<Vec<f64>>,
    num_states: Vec<usize>,
    y: Vec<f64>,
    inv_two_var: f64,
    /// Row-major `K_i × K_i` blocks, `[t][i]` flattened with `trans_offsets`.
    trans: Vec<f64>,
    trans_offsets: Vec<usize>,
    trans_stride: usize,
}

impl Objective {
    pub fn new(
        model: &FhmmModel,
        trace: &ObservationTrace,
        edges: EdgeMode,
        log_zero: LogZero,
    ) -> Result<Self> {
        let len = trace.len();
        if len == 0 {
            return Err(FhmmError::InvalidInput("empty observation trace".into()));
        }
        let num_states = model.num_states();
        let mut trans_offsets = Vec::with_capacity(num_states.len());
        let mut stride = 0;
        for &k in &num_states {
            trans_offsets.push(stride);
            stride += k * k;
        }
        let edge = if edges.enabled() && len >= 2 {
            Some(edge_costs(model, trace)?)
        } else {
            None
        };
        let sign = edges.sign();
        let mut trans = vec![0.0; stride * (len - 1)];
        for t in 0..len - 1 {
            for (i, app) in model.appliances.iter().enumerate() {
                let k = app.num_states();
                let base = t * stride + trans_offsets[i];
                for from in 0..k {
                    for to in 0..k {
                        let p = app.transition[from][to];
                        let mut c = if p > 0.0 {
                            -p.ln()
                        } else {
                            match log_zero {
                                LogZero::Infinite => f64::INFINITY,
                                LogZero::Penalty => FORBIDDEN_PENALTY,
                            }
                        };
                        if let Some(e) = &edge {
                            c += sign * e.get(t, i)[(from, to)];
                        }
                        trans[base + from * k + to] = c;
                    }
                }
            }
        }
        Ok(Self {
            levels: model
                .appliances
                .iter()
                .map(|a| a.power_levels.clone())
                .collect(),
            num_states,
            y: trace.aggregate.clone(),
            inv_two_var: 1.0 / (2.0 * model.sigma * model.sigma),
            trans,
            trans_offsets,
            trans_stride: stride,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_states(&self) -> &[usize] {
        &self.num_states
    }

    pub fn num_appliances(&self) -> usize {
        self.num_states.len()
    }

    /// Predicted aggregate for a row of states.
    pub fn predicted(&self, row: &[usize]) -> f64 {
        row.iter()
            .zip(&self.levels)
            .map(|(&s, levels)| levels[s])
            .sum()
    }

    /// `(y_t − Σ_i μ_{i,s_i})² / 2σ²` for an explicit state row.
    pub fn quadratic_row(&self, t: usize, row: &[usize]) -> f64 {
        let r = self.y[t] - self.predicted(row);
        r * r * self.inv_two_var
    }

    pub fn quadratic(&self, states: &StateSequence, t: usize) -> f64 {
        self.quadratic_row(t, states.row(t))
    }

    /// Cost of appliance `i` moving `from → to` between `t` and `t + 1`.
    pub fn transition(&self, t: usize, i: usize, from: usize, to: usize) -> f64 {
        let k = self.num_states[i];
        self.trans[t * self.trans_stride + self.trans_offsets[i] + from * k + to]
    }

    /// The `K_i × K_i` cost block of appliance `i` at `t`, row-major.
    pub fn transition_block(&self, t: usize, i: usize) -> &[f64] {
        let k = self.num_states[i];
        let start = t * self.trans_stride + self.trans_offsets[i];
        &self.trans[start..start + k * k]
    }

    /// Joint transition cost between two state rows.
    pub fn transition_row(&self, t: usize, from: &[usize], to: &[usize]) -> f64 {
        (0..self.num_states.len())
            .map(|i| self.transition(t, i, from[i], to[i]))
            .sum()
    }

    pub fn quadratic_total(&self, states: &StateSequence) -> f64 {
        (0..self.len()).map(|t| self.quadratic(states, t)).sum()
    }

    pub fn transition_total(&self, states: &StateSequence) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|t| self.transition_row(t, states.row(t), states.row(t + 1)))
            .sum()
    }

    /// The full objective.
    pub fn total(&self, states: &StateSequence) -> f64 {
        self.quadratic_total(states) + self.transition_total(states)
    }

    /// All terms that depend on the states at `center − 1`, `center`, `center + 1`.
    pub fn window(&self, states: &StateSequence, center: usize) -> f64 {
        let len = self.len();
        let lo = center.saturating_sub(1);
        let hi = (center + 1).min(len - 1);
        let quad: f64 = (lo..=hi).map(|t| self.quadratic(states, t)).sum();
        let tlo = center.saturating_sub(2);
        let thi = (center + 1).min(len.saturating_sub(2));
        let trans: f64 = if len >= 2 {
            (tlo..=thi)
                .map(|t| self.transition_row(t, states.row(t), states.row(t + 1)))
                .sum()
        } else {
            0.0
        };
        quad + trans
    }

    /// Terms touched by a single `(t, i)` state: the quadratic at `t` and the
    /// two transitions of appliance `i` around `t`.
    pub fn local(&self, states: &StateSequence, t: usize, i: usize, state: usize) -> f64 {
        let row = states.row(t);
        let mut pred = 0.0;
        for (j, (&s, levels)) in row.iter().zip(&self.levels).enumerate() {
            pred += if j == i { levels[state] } else { levels[s] };
        }
        let r = self.y[t] - pred;
        let mut value = r * r * self.inv_two_var;
        if t > 0 {
            value += self.transition(t - 1, i, states.get(t - 1, i), state);
        }
        if t + 1 < self.len() {
            value += self.transition(t, i, state, states.get(t + 1, i));
        }
        value
    }
}

/// Evaluates the MAP objective; forbidden transitions give `+∞`.
pub fn objective(
    model: &FhmmModel,
    trace: &ObservationTrace,
    states: &StateSequence,
    edges: impl Into<EdgeMode>,
) -> Result<f64> {
    check_dims(model, trace, states)?;
    let obj = Objective::new(model, trace, edges.into(), LogZero::Infinite)?;
    Ok(obj.total(states))
}

pub(crate) fn check_dims(
    model: &FhmmModel,
    trace: &ObservationTrace,
    states: &StateSequence,
) -> Result<()> {
    states.check(&model.num_states())?;
    if states.len() != trace.len() {
        return Err(FhmmError::Dimension(format!(
            "state sequence has {} steps, trace has {}",
            states.len(),
            trace.len()
        )));
    }
    Ok(())
}
