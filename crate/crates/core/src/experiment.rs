//! Synthetic comparison of ADMM-RR against naive rounding, as NDE curves
//! over the number of appliances and the number of states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::SolverConfig;
use crate::datagen::{random_model, simulate_generated, GenConfig};
use crate::error::{FhmmError, Result};
use crate::metrics::{nde, PlotPoint};
use crate::rounding::{admm_rr, RoundingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub num_appliances: usize,
    pub num_states: usize,
    pub seed: u64,
    pub nde_admm_rr: f64,
    pub nde_naive: f64,
    pub objective_admm_rr: f64,
    pub objective_naive: f64,
    pub converged: bool,
}

/// Seed of the simulated trace for a model seed.
pub fn trace_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed
}

/// Generates one model and trace, then scores both roundings of the same solve.
pub fn run_instance(
    num_appliances: usize,
    num_states: usize,
    len: usize,
    seed: u64,
    solver: SolverConfig,
    rounding: RoundingConfig,
) -> Result<InstanceResult> {
    let model = random_model(&GenConfig::new(num_appliances, num_states, len, seed))?;
    let (_, trace) = simulate_generated(&model, len, trace_seed(seed))?;
    let truth = trace.per_appliance.clone().ok_or_else(|| {
        FhmmError::InvalidInput("simulated trace lacks per-appliance truth".into())
    })?;
    let out = admm_rr(
        &model,
        &trace,
        solver,
        RoundingConfig { seed, ..rounding },
        false,
    )?;
    Ok(InstanceResult {
        num_appliances,
        num_states,
        seed,
        nde_admm_rr: nde(&truth, &out.states.reconstruct(&model))?,
        nde_naive: nde(&truth, &out.naive_states.reconstruct(&model))?,
        objective_admm_rr: out.objective,
        objective_naive: out.naive_objective,
        converged: out.relaxed.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Appliance counts swept at `base_states` states.
    pub appliances: Vec<usize>,
    /// State counts swept at `base_appliances` appliances.
    pub states: Vec<usize>,
    pub base_appliances: usize,
    pub base_states: usize,
    pub len: usize,
    pub seeds: u64,
    pub solver: SolverConfig,
    pub rounding: RoundingConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            appliances: vec![2, 3, 4],
            states: vec![2, 3],
            base_appliances: 2,
            base_states: 2,
            len: 200,
            seeds: 20,
            solver: SolverConfig::default(),
            rounding: RoundingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub instances: Vec<InstanceResult>,
    pub points: Vec<PlotPoint>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs both sweeps; seeds run in parallel, results keep a fixed order.
pub fn nde_sweep(config: &SweepConfig) -> Result<SweepResult> {
    let mut jobs: Vec<(usize, usize)> = config
        .appliances
        .iter()
        .map(|&m| (m, config.base_states))
        .collect();
    for &k in &config.states {
        if !jobs.contains(&(config.base_appliances, k)) {
            jobs.push((config.base_appliances, k));
        }
    }
    let tasks: Vec<(usize, usize, u64)> = jobs
        .iter()
        .flat_map(|&(m, k)| (0..config.seeds).map(move |s| (m, k, s)))
        .collect();
    let instances = tasks
        .par_iter()
        .map(|&(m, k, s)| run_instance(m, k, config.len, s, config.solver, config.rounding))
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::new();
    let mut series = |name: &str, x: f64, pick: &dyn Fn(&InstanceResult) -> bool| {
        let sel: Vec<&InstanceResult> = instances.iter().filter(|r| pick(r)).collect();
        points.push(PlotPoint {
            metric: format!("nde_admm_rr_vs_{name}"),
            x,
            y: mean(sel.iter().map(|r| r.nde_admm_rr)),
        });
        points.push(PlotPoint {
            metric: format!("nde_naive_vs_{name}"),
            x,
            y: mean(sel.iter().map(|r| r.nde_naive)),
        });
    };
    for &m in &config.appliances {
        series("M", m as f64, &|r| {
            r.num_appliances == m && r.num_states == config.base_states
        });
    }
    for &k in &config.states {
        series("K", k as f64, &|r| {
            r.num_states == k && r.num_appliances == config.base_appliances
        });
    }
    Ok(SweepResult { instances, points })
}
