//! Moreau–Yosida regularized ADMM for the block SDP.
//!
//! The proximal terms `(1/2μ)‖X̂_t − S_t‖²` and `(1/2μ)‖z_t − r_t‖²` make every
//! dual block update closed form. One sweep visits `t = 0..T` in order
//! and updates `P_t, W_t, λ_t, S_t, r_t, h_t, ν_t`, each time using the
//! freshest values of the neighbouring steps (Gauss–Seidel).
//!
//! With `G_t = 𝒜ᵀλ_t + ℬᵀν_t + ℰᵀν_{t−1} + W_t + P_t − D_t` and
//! `H_t = 𝒞ᵀν_t + h_t − d_t`, the primal estimates are
//! `X̂*_t = S_t + μ G_t` and `z*_t = r_t + μ H_t`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::linalg::{min_eigenvalue, psd_project, symmetric_pinv, SvecLayout};
use crate::relaxation::{
    relaxed_objective, LiftedBlock, LiftedPoint, SdpBlockProblem, TransitionVector,
};

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Proximal step `μ`.
    pub mu_step: f64,
    pub max_sweeps: usize,
    /// Convergence threshold on the largest primal and dual residual.
    pub tolerance: f64,
    /// Residuals are evaluated every this many sweeps.
    pub check_period: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu_step: 0.001,
            max_sweeps: 2500,
            tolerance: 1e-4,
            check_period: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_step > 0.0 && self.mu_step.is_finite())
            || self.max_sweeps == 0
            || self.tolerance.is_nan()
            || self.tolerance <= 0.0
            || self.check_period == 0
        {
            return Err(FhmmError::InvalidInput(format!(
                "solver settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cached pseudo-inverses of the constraint Gram matrices.
#[derive(Debug, Clone)]
pub struct PinvCache {
    /// `(𝒜𝒜ᵀ)†`.
    pub block: DMatrix<f64>,
    /// `(ℬℬᵀ + 𝒞𝒞ᵀ + ℰℰᵀ)†`.
    pub coupling: DMatrix<f64>,
}

pub fn precompute_pinv(problem: &SdpBlockProblem) -> Result<PinvCache> {
    let block = symmetric_pinv(&problem.a.gram())?;
    let coupling_gram =
        problem.coupling_b.gram() + problem.coupling_c.gram() + problem.coupling_e.gram();
    let coupling = symmetric_pinv(&coupling_gram)?;
    Ok(PinvCache { block, coupling })
}

/// Primal surrogates and dual variables of every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    /// `svec(S_t)`.
    pub s: Vec<DVector<f64>>,
    pub r: Vec<DVector<f64>>,
    /// `svec(W_t)`, elementwise non-negative.
    pub w: Vec<DVector<f64>>,
    /// `svec(P_t)`, positive semidefinite.
    pub p: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    pub h: Vec<DVector<f64>>,
    pub sweeps: usize,
}

impl AdmmState {
    /// All-zero initialization.
    pub fn zeros(problem: &SdpBlockProblem) -> Self {
        let len = problem.len();
        let sv = problem.layout().len();
        let zl = problem.transition_len();
        let m = problem.num_block_constraints();
        let mc = problem.num_coupling_constraints();
        let links = len.saturating_sub(1);
        Self {
            s: vec![DVector::zeros(sv); len],
            r: vec![DVector::zeros(zl); links],
            w: vec![DVector::zeros(sv); len],
            p: vec![DVector::zeros(sv); len],
            lambda: vec![DVector::zeros(m); len],
            nu: vec![DVector::zeros(mc); links],
            h: vec![DVector::zeros(zl); links],
            sweeps: 0,
        }
    }
}

/// Feasibility measures of a recovered primal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_t ‖𝒜X̂*_t − b‖_∞`.
    pub block: f64,
    /// `max_t ‖ℬX̂*_t + 𝒞z*_t + ℰX̂*_{t+1} − g‖_∞`.
    pub coupling: f64,
    /// Smallest eigenvalue over all `X̂*_t`.
    pub min_eig: f64,
    /// Smallest entry over all `X̂*_t` and `z*_t`.
    pub min_entry: f64,
    /// `max_t ‖X̂*_t − S_t‖_∞` and the same for `z`: the primal step of the
    /// next multiplier update, zero at a fixed point.
    pub dual: f64,
    /// `|p − q| / (1 + |p| + |q|)` between the primal objective `p` and the
    /// dual objective `q = Σ_t bᵀλ_t + gᵀν_t` (both with the constant offset).
    pub gap: f64,
}

impl Residuals {
    /// Largest violation among all measures.
    pub fn max_violation(&self) -> f64 {
        self.block
            .max(self.coupling)
            .max(-self.min_eig)
            .max(-self.min_entry)
            .max(self.dual)
            .max(self.gap)
    }
}

/// One row of the residual log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub sweep: usize,
    #[serde(rename = "max_A_residual")]
    pub max_a_residual: f64,
    pub max_coupling_residual: f64,
    pub min_eig: f64,
    pub objective: f64,
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    pub point: LiftedPoint,
    /// Relaxed objective including the constant offset: the SDP lower bound.
    pub objective: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub residuals: Residuals,
    pub history: Vec<ResidualRecord>,
}

impl RelaxedSolution {
    /// `x*_t`, the first-row tail of each recovered block.
    pub fn x(&self, t: usize) -> Vec<f64> {
        self.point.blocks[t].x()
    }

    pub fn len(&self) -> usize {
        self.point.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point.blocks.is_empty()
    }

    /// Writes the residual log as CSV.
    pub fn write_history<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for row in &self.history {
            writer
                .serialize(row)
                .map_err(|e| FhmmError::InvalidInput(format!("residual log: {e}")))?;
        }
        writer
            .flush()
            .map_err(|e| FhmmError::InvalidInput(format!("residual log: {e}")))?;
        Ok(())
    }
}

/// Iterative solver holding its state between sweeps.
#[derive(Debug, Clone)]
pub struct AdmmSolver<'a> {
    problem: &'a SdpBlockProblem,
    config: SolverConfig,
    pinv: PinvCache,
    cost_blocks: &'a [DVector<f64>],
    cost_linear: &'a [DVector<f64>],
    state: AdmmState,
    history: Vec<ResidualRecord>,
}

impl<'a> AdmmSolver<'a> {
    pub fn new(problem: &'a SdpBlockProblem, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let pinv = precompute_pinv(problem)?;
        Ok(Self {
            problem,
            config,
            pinv,
            cost_blocks: &problem.cost_blocks,
            cost_linear: &problem.cost_linear,
            state: AdmmState::zeros(problem),
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> &AdmmState {
        &self.state
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn sweeps(&self) -> usize {
        self.state.sweeps
    }

    /// `ℬᵀν_t + ℰᵀν_{t−1}`, with the boundary terms dropped.
    fn coupling_adjoint(&self, t: usize) -> DVector<f64> {
        let p = self.problem;
        let mut v = DVector::zeros(p.layout().len());
        if t + 1 < p.len() {
            p.coupling_b.tmul_acc(&self.state.nu[t], 1.0, &mut v);
        }
        if t > 0 {
            p.coupling_e.tmul_acc(&self.state.nu[t - 1], 1.0, &mut v);
        }
        v
    }

    /// One Gauss–Seidel pass over all time steps.
    pub fn sweep(&mut self) -> Result<()> {
        let p = self.problem;
        let layout = p.layout();
        let mu = self.config.mu_step;
        let len = p.len();
        for t in 0..len {
            let coupling = self.coupling_adjoint(t);
            let d_t = &self.cost_blocks[t];
            let st = &self.state;
            let a_adj = p.a.tmul_vec(&st.lambda[t]);

            // R_t = D_t − 𝒜ᵀλ_t − ℬᵀν_t − ℰᵀν_{t−1} − S_t/μ
            let resid = d_t - &a_adj - &coupling - &st.s[t] / mu;
            let p_new = layout.pack(
                &psd_project(&layout.unpack(&(&resid - &st.w[t])))
                    .map_err(|e| at_step(e, t, "P"))?,
            );
            let w_new = (&resid - &p_new).map(|v| v.max(0.0));

            // everything in G_t except 𝒜ᵀλ_t
            let rest = &coupling + &w_new + &p_new - d_t;
            let lambda_rhs = &p.b - p.a.mul_vec(&(&st.s[t] + &rest * mu));
            let lambda_new = &self.pinv.block * lambda_rhs / mu;
            let s_new = &st.s[t] + (p.a.tmul_vec(&lambda_new) + &rest) * mu;

            self.state.p[t] = p_new;
            self.state.w[t] = w_new;
            self.state.lambda[t] = lambda_new;
            self.state.s[t] = s_new;
            check_finite(&self.state.s[t], t, "S")?;

            if t + 1 < len {
                let d_lin = &self.cost_linear[t];
                let st = &self.state;
                let c_adj = p.coupling_c.tmul_vec(&st.nu[t]);
                let r_new = &st.r[t] + (&c_adj + &st.h[t] - d_lin) * mu;
                let h_new = (d_lin - &c_adj - &r_new / mu).map(|v| v.max(0.0));

                // ν_t-free parts of X̂*_t, z*_t and X̂*_{t+1}
                let mut own = p.a.tmul_vec(&st.lambda[t]) + &st.w[t] + &st.p[t] - d_t;
                if t > 0 {
                    p.coupling_e.tmul_acc(&st.nu[t - 1], 1.0, &mut own);
                }
                let own_x = &st.s[t] + own * mu;
                let own_z = &r_new + (&h_new - d_lin) * mu;
                let mut next = p.a.tmul_vec(&st.lambda[t + 1]) + &st.w[t + 1] + &st.p[t + 1]
                    - &self.cost_blocks[t + 1];
                if t + 2 < len {
                    p.coupling_b.tmul_acc(&st.nu[t + 1], 1.0, &mut next);
                }
                let next_x = &st.s[t + 1] + next * mu;
                let rhs = &p.g
                    - p.coupling_b.mul_vec(&own_x)
                    - p.coupling_c.mul_vec(&own_z)
                    - p.coupling_e.mul_vec(&next_x);
                let nu_new = &self.pinv.coupling * rhs / mu;

                self.state.r[t] = r_new;
                self.state.h[t] = h_new;
                self.state.nu[t] = nu_new;
                check_finite(&self.state.nu[t], t, "nu")?;
            }
        }
        self.state.sweeps += 1;
        Ok(())
    }

    /// `G_t = (X̂*_t − S_t)/μ`.
    fn block_gradient(&self, t: usize) -> DVector<f64> {
        let st = &self.state;
        self.problem.a.tmul_vec(&st.lambda[t]) + self.coupling_adjoint(t) + &st.w[t] + &st.p[t]
            - &self.cost_blocks[t]
    }

    fn link_gradient(&self, t: usize) -> DVector<f64> {
        let st = &self.state;
        self.problem.coupling_c.tmul_vec(&st.nu[t]) + &st.h[t] - &self.cost_linear[t]
    }

    /// Recovered primal point `(X̂*, z*)`.
    pub fn recover(&self) -> LiftedPoint {
        let layout = self.problem.layout();
        let mu = self.config.mu_step;
        let blocks = (0..self.problem.len())
            .map(|t| LiftedBlock {
                xhat: layout.unpack(&(&self.state.s[t] + self.block_gradient(t) * mu)),
            })
            .collect();
        let transitions = (0..self.problem.len().saturating_sub(1))
            .map(|t| TransitionVector {
                z: &self.state.r[t] + self.link_gradient(t) * mu,
            })
            .collect();
        LiftedPoint {
            blocks,
            transitions,
        }
    }

    /// `Σ_t bᵀλ_t + gᵀν_t` plus the constant offset.
    pub fn dual_objective(&self) -> f64 {
        let st = &self.state;
        let p = self.problem;
        p.offset
            + st.lambda.iter().map(|l| p.b.dot(l)).sum::<f64>()
            + st.nu.iter().map(|n| p.g.dot(n)).sum::<f64>()
    }

    /// Residuals of the recovered point.
    pub fn residuals(&self, point: &LiftedPoint) -> Result<Residuals> {
        let (block, coupling) = self.problem.max_residuals(point);
        let mut min_eig = f64::INFINITY;
        let mut min_entry = f64::INFINITY;
        for (t, b) in point.blocks.iter().enumerate() {
            min_eig = min_eig.min(min_eigenvalue(&b.xhat).map_err(|e| at_step(e, t, "X*"))?);
            min_entry = min_entry.min(b.xhat.min());
        }
        for z in &point.transitions {
            min_entry = min_entry.min(z.z.min());
        }
        let mu = self.config.mu_step;
        let dual = (0..self.problem.len())
            .map(|t| self.block_gradient(t).amax())
            .chain((0..self.problem.len().saturating_sub(1)).map(|t| self.link_gradient(t).amax()))
            .fold(0.0, f64::max)
            * mu;
        let primal = relaxed_objective(self.problem, point)?;
        let dual_obj = self.dual_objective();
        let gap = (primal - dual_obj).abs() / (1.0 + primal.abs() + dual_obj.abs());
        Ok(Residuals {
            block,
            coupling,
            min_eig,
            min_entry,
            dual,
            gap,
        })
    }

    /// Recovers the primal point and evaluates residuals and objective.
    pub fn snapshot(&self) -> Result<RelaxedSolution> {
        let point = self.recover();
        let residuals = self.residuals(&point)?;
        let objective = relaxed_objective(self.problem, &point)?;
        Ok(RelaxedSolution {
            point,
            objective,
            converged: residuals.max_violation() <= self.config.tolerance,
            sweeps: self.state.sweeps,
            residuals,
            history: self.history.clone(),
        })
    }

    /// Runs sweeps until convergence or the sweep budget, calling `on_sweep`
    /// after every sweep with the solver so callers can take snapshots.
    pub fn run_with<F>(&mut self, mut on_sweep: F) -> Result<RelaxedSolution>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        while self.state.sweeps < self.config.max_sweeps {
            self.sweep()?;
            on_sweep(self)?;
            if self.state.sweeps.is_multiple_of(self.config.check_period) {
                let point = self.recover();
                let residuals = self.residuals(&point)?;
                self.history.push(ResidualRecord {
                    sweep: self.state.sweeps,
                    max_a_residual: residuals.block,
                    max_coupling_residual: residuals.coupling,
                    min_eig: residuals.min_eig,
                    objective: relaxed_objective(self.problem, &point)?,
                });
                if residuals.max_violation() <= self.config.tolerance {
                    break;
                }
            }
        }
        self.snapshot()
    }
}

fn at_step(err: FhmmError, t: usize, variable: &'static str) -> FhmmError {
    match err {
        FhmmError::Numerical { detail, .. } => FhmmError::Numerical {
            t,
            variable,
            detail,
        },
        other => other,
    }
}

fn check_finite(v: &DVector<f64>, t: usize, variable: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FhmmError::Numerical {
            t,
            variable,
            detail: "non-finite value after update".into(),
        })
    }
}

/// Solves the relaxation from a zero start.
pub fn solve(problem: &SdpBlockProblem, config: SolverConfig) -> Result<RelaxedSolution> {
    let mut solver = AdmmSolver::new(problem, config)?;
    solver.run_with(|_| Ok(()))
}

/// Smallest eigenvalue of an svec-packed matrix.
pub fn packed_min_eigenvalue(layout: SvecLayout, v: &DVector<f64>) -> Result<f64> {
    min_eigenvalue(&layout.unpack(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_map_viterbi;
    use crate::model::{simulate, ApplianceHmm, FhmmModel};
    use crate::relaxation::build;

    fn small() -> (FhmmModel, crate::model::ObservationTrace) {
        let app = |mu: f64| ApplianceHmm::new(vec![0.0, mu], vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        let model = FhmmModel::new(vec![app(100.0), app(260.0)], 20.0, 20.0);
        let (_, trace) = simulate(&model, 4, 7).unwrap();
        (model, trace)
    }

    #[test]
    fn rejects_bad_settings() {
        let bad = SolverConfig {
            mu_step: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            check_period: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn converged_solution_is_a_lower_bound() {
        let (model, trace) = small();
        let problem = build(&model, &trace, false).unwrap();
        let config = SolverConfig {
            mu_step: 0.01,
            max_sweeps: 20000,
            ..SolverConfig::default()
        };
        let sol = solve(&problem, config).unwrap();
        assert!(sol.converged, "{:?}", sol.residuals);
        let (_, exact) = exact_map_viterbi(&model, &trace, false).unwrap();
        assert!(sol.objective <= exact + 1e-3 * (1.0 + exact.abs()));
        assert!(sol.residuals.block <= 1e-4 && sol.residuals.gap <= 1e-4);
        assert_eq!(sol.history.last().unwrap().sweep, sol.sweeps);
        assert_eq!(sol.len(), 4);
        assert_eq!(sol.x(0).len(), 4);
    }

    #[test]
    fn residual_log_has_header() {
        let (model, trace) = small();
        let problem = build(&model, &trace, false).unwrap();
        let config = SolverConfig {
            max_sweeps: 30,
            ..SolverConfig::default()
        };
        let sol = solve(&problem, config).unwrap();
        assert_eq!(sol.sweeps, 30);
        let mut buf = Vec::new();
        sol.write_history(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sweep,max_A_residual,max_coupling_residual,min_eig,objective"
        );
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn sweeps_reduce_the_block_residual() {
        let (model, trace) = small();
        let problem = build(&model, &trace, false).unwrap();
        let mut solver = AdmmSolver::new(&problem, SolverConfig::default()).unwrap();
        solver.sweep().unwrap();
        let early = solver.residuals(&solver.recover()).unwrap();
        for _ in 0..2000 {
            solver.sweep().unwrap();
        }
        let late = solver.residuals(&solver.recover()).unwrap();
        assert!(late.block < early.block);
        assert!(late.max_violation() < early.max_violation());
    }
}
