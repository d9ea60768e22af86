//! Chain-structured SDP relaxation of the MAP problem.
//!
//! Every time step owns a lifted block `X̂_t = [[1, x_tᵀ], [x_t, X_t]]` of side
//! `n + 1` (with `n = Σ_i K_i`) and, for `t < T − 1`, a transition vector
//! `z_t = [vec(Z_{t,1}); …; vec(Z_{t,M})]` where `Z_{t,i}` relaxes
//! `x_{t,i} x_{t+1,i}ᵀ`. The problem is
//!
//! ```text
//! minimize   Σ_t ⟨D_t, X̂_t⟩ + d_tᵀ z_t
//! subject to 𝒜 X̂_t = b,   ℬ X̂_t + 𝒞 z_t + ℰ X̂_{t+1} = g,
//!            X̂_t ⪰ 0,   X̂_t ≥ 0,   z_t ≥ 0
//! ```
//!
//! Symmetric matrices are handled in svec form throughout, so the
//! operators are plain sparse matrices acting on vectors.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FhmmError, Result};
use crate::linalg::{SparseMatrix, SvecLayout, Triplet};
use crate::model::{EdgeMode, FhmmModel, LogZero, Objective, ObservationTrace, StateSequence};

/// A lifted block `X̂ = [[1, xᵀ], [x, X]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBlock {
    pub xhat: DMatrix<f64>,
}

impl LiftedBlock {
    /// Rank-one lift of a stacked one-hot vector.
    pub fn from_vector(x: &[f64]) -> Self {
        let mut v = Vec::with_capacity(x.len() + 1);
        v.push(1.0);
        v.extend_from_slice(x);
        let v = DVector::from_vec(v);
        Self {
            xhat: &v * v.transpose(),
        }
    }

    /// The first-row tail `x`.
    pub fn x(&self) -> Vec<f64> {
        let n = self.xhat.nrows() - 1;
        (1..=n).map(|j| self.xhat[(0, j)]).collect()
    }

    /// The lower-right block `X`.
    pub fn big_x(&self) -> DMatrix<f64> {
        let n = self.xhat.nrows() - 1;
        self.xhat.view((1, 1), (n, n)).into_owned()
    }
}

/// `z_t`, the concatenation of column-major `vec(Z_{t,i})`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionVector {
    pub z: DVector<f64>,
}

impl TransitionVector {
    /// Outer-product lift `Z_{t,i} = x_{t,i} x_{t+1,i}ᵀ` of consecutive rows.
    pub fn from_states(from: &[usize], to: &[usize], num_states: &[usize]) -> Self {
        let len: usize = num_states.iter().map(|k| k * k).sum();
        let mut z = DVector::zeros(len);
        let mut offset = 0;
        for (i, &k) in num_states.iter().enumerate() {
            z[offset + vec_index(from[i], to[i], k)] = 1.0;
            offset += k * k;
        }
        Self { z }
    }

    /// `Z_{t,i}` as a `K_i × K_i` matrix.
    pub fn block(&self, i: usize, num_states: &[usize]) -> DMatrix<f64> {
        let offset: usize = num_states[..i].iter().map(|k| k * k).sum();
        let k = num_states[i];
        DMatrix::from_fn(k, k, |from, to| self.z[offset + vec_index(from, to, k)])
    }
}

/// Column-major position of `Z[from][to]` inside `vec(Z)`.
#[inline]
pub fn vec_index(from: usize, to: usize, k: usize) -> usize {
    from + to * k
}

/// The assembled block SDP.
#[derive(Debug, Clone)]
pub struct SdpBlockProblem {
    len: usize,
    num_states: Vec<usize>,
    layout: SvecLayout,
    /// `svec(D_t)`, one per time step.
    pub cost_blocks: Vec<DVector<f64>>,
    /// `d_t`, one per transition `t ∈ [0, T − 1)`.
    pub cost_linear: Vec<DVector<f64>>,
    pub a: SparseMatrix,
    pub b: DVector<f64>,
    pub coupling_b: SparseMatrix,
    pub coupling_c: SparseMatrix,
    pub coupling_e: SparseMatrix,
    pub g: DVector<f64>,
    /// `Σ_t y_t² / 2σ²`.
    pub offset: f64,
}

/// Everything needed to evaluate a relaxed point.
#[derive(Debug, Clone)]
pub struct LiftedPoint {
    pub blocks: Vec<LiftedBlock>,
    pub transitions: Vec<TransitionVector>,
}

impl SdpBlockProblem {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_states(&self) -> &[usize] {
        &self.num_states
    }

    /// `n = Σ_i K_i`.
    pub fn total_states(&self) -> usize {
        self.num_states.iter().sum()
    }

    pub fn layout(&self) -> SvecLayout {
        self.layout
    }

    /// `m = 1 + n + M`.
    pub fn num_block_constraints(&self) -> usize {
        self.a.rows()
    }

    /// `m' = 2n`.
    pub fn num_coupling_constraints(&self) -> usize {
        self.coupling_b.rows()
    }

    /// `Σ_i K_i²`.
    pub fn transition_len(&self) -> usize {
        self.coupling_c.cols()
    }

    pub fn cost_matrix(&self, t: usize) -> DMatrix<f64> {
        self.layout.unpack(&self.cost_blocks[t])
    }

    /// `‖𝒜 X̂ − b‖_∞` of a single block.
    pub fn block_residual(&self, block: &LiftedBlock) -> f64 {
        let v = self.layout.pack(&block.xhat);
        (self.a.mul_vec(&v) - &self.b).amax()
    }

    /// `‖ℬ X̂_t + 𝒞 z_t + ℰ X̂_{t+1} − g‖_∞`.
    pub fn coupling_residual(
        &self,
        current: &LiftedBlock,
        z: &TransitionVector,
        next: &LiftedBlock,
    ) -> f64 {
        let r = self.coupling_b.mul_vec(&self.layout.pack(&current.xhat))
            + self.coupling_c.mul_vec(&z.z)
            + self.coupling_e.mul_vec(&self.layout.pack(&next.xhat))
            - &self.g;
        r.amax()
    }

    /// Largest equality violation over all blocks and coupling groups.
    pub fn max_residuals(&self, point: &LiftedPoint) -> (f64, f64) {
        let a = point
            .blocks
            .iter()
            .map(|b| self.block_residual(b))
            .fold(0.0, f64::max);
        let c = point
            .transitions
            .iter()
            .enumerate()
            .map(|(t, z)| self.coupling_residual(&point.blocks[t], z, &point.blocks[t + 1]))
            .fold(0.0, f64::max);
        (a, c)
    }

    /// Writes one JSON object per time step: dense `D_t`, `d_t` and the
    /// operators as sparse triplets.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            t: usize,
            #[serde(rename = "D")]
            cost_block: Vec<Vec<f64>>,
            d: Vec<f64>,
            #[serde(rename = "A")]
            a: &'a [Triplet],
            b: &'a [f64],
            #[serde(rename = "B")]
            coupling_b: &'a [Triplet],
            #[serde(rename = "C")]
            coupling_c: &'a [Triplet],
            #[serde(rename = "E")]
            coupling_e: &'a [Triplet],
            g: &'a [f64],
        }
        let (a, bb, cc, ee) = (
            self.a.triplets(),
            self.coupling_b.triplets(),
            self.coupling_c.triplets(),
            self.coupling_e.triplets(),
        );
        for t in 0..self.len {
            let dense = self.cost_matrix(t);
            let record = Record {
                t,
                cost_block: dense
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
                d: self
                    .cost_linear
                    .get(t)
                    .map(|d| d.iter().copied().collect())
                    .unwrap_or_default(),
                a: &a,
                b: self.b.as_slice(),
                coupling_b: &bb,
                coupling_c: &cc,
                coupling_e: &ee,
                g: self.g.as_slice(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Assembles the relaxation of the MAP problem for `(model, trace)`.
///
/// `d_t` holds the transition costs `C_{t,i}` (with `−log 0` replaced by
/// [`crate::model::FORBIDDEN_PENALTY`]) so that at integral lifts the
/// relaxed objective equals the MAP objective.
pub fn build(
    model: &FhmmModel,
    trace: &ObservationTrace,
    edges: impl Into<EdgeMode>,
) -> Result<SdpBlockProblem> {
    model.validate()?;
    let len = trace.len();
    if len == 0 {
        return Err(FhmmError::Dimension("empty observation trace".into()));
    }
    if let Some(per) = &trace.per_appliance {
        if per.len() != len || per.iter().any(|r| r.len() != model.num_appliances()) {
            return Err(FhmmError::Dimension(
                "per-appliance trace does not match the model".into(),
            ));
        }
    }
    let costs = Objective::new(model, trace, edges.into(), LogZero::Penalty)?;
    let num_states = model.num_states();
    let n: usize = num_states.iter().sum();
    let layout = SvecLayout::new(n + 1);
    let inv_two_var = 1.0 / (2.0 * model.sigma * model.sigma);

    let mu: Vec<f64> = model
        .appliances
        .iter()
        .flat_map(|a| a.power_levels.iter().copied())
        .collect();
    let cost_blocks = trace
        .aggregate
        .iter()
        .map(|&y| {
            let mut d = DMatrix::zeros(n + 1, n + 1);
            for j in 0..n {
                d[(0, j + 1)] = -y * mu[j] * inv_two_var;
                d[(j + 1, 0)] = -y * mu[j] * inv_two_var;
                for k in 0..n {
                    d[(j + 1, k + 1)] = mu[j] * mu[k] * inv_two_var;
                }
            }
            layout.pack(&d)
        })
        .collect();

    let z_len: usize = num_states.iter().map(|k| k * k).sum();
    let cost_linear = (0..len.saturating_sub(1))
        .map(|t| {
            let mut d = DVector::zeros(z_len);
            let mut offset = 0;
            for (i, &k) in num_states.iter().enumerate() {
                let block = costs.transition_block(t, i);
                for from in 0..k {
                    for to in 0..k {
                        d[offset + vec_index(from, to, k)] = block[from * k + to];
                    }
                }
                offset += k * k;
            }
            d
        })
        .collect();

    let (a, b) = block_operator(&num_states, layout);
    let (coupling_b, coupling_c, coupling_e, g) = coupling_operators(&num_states, layout);
    let offset = trace.aggregate.iter().map(|y| y * y * inv_two_var).sum();

    Ok(SdpBlockProblem {
        len,
        num_states,
        layout,
        cost_blocks,
        cost_linear,
        a,
        b,
        coupling_b,
        coupling_c,
        coupling_e,
        g,
        offset,
    })
}

/// Rows: `X̂[0][0] = 1`; `X̂[j][j] − X̂[0][j] = 0` for each `j`;
/// `Σ_{j ∈ block i} X̂[0][j] = 1` for each appliance.
///
/// Rows touching off-diagonal entries are scaled by `√2` so their
/// coefficients on svec slots are `±1`, which keeps residuals of integral
/// lifts exactly zero.
fn block_operator(num_states: &[usize], layout: SvecLayout) -> (SparseMatrix, DVector<f64>) {
    let n: usize = num_states.iter().sum();
    let m = 1 + n + num_states.len();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut entries = vec![(0, layout.index(0, 0), 1.0)];
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    for j in 1..=n {
        entries.push((j, layout.index(j, j), sqrt2));
        entries.push((j, layout.index(0, j), -1.0));
    }
    let mut offset = 1;
    for (i, &k) in num_states.iter().enumerate() {
        let row = 1 + n + i;
        for j in offset..offset + k {
            entries.push((row, layout.index(0, j), 1.0));
        }
        rhs[row] = sqrt2;
        offset += k;
    }
    (
        SparseMatrix::from_triplets(m, layout.len(), entries),
        DVector::from_vec(rhs),
    )
}

/// Per appliance: `Z_{t,i} 𝟙 − x_{t,i} = 0` (reads `X̂_t`) followed by
/// `Z_{t,i}ᵀ 𝟙 − x_{t+1,i} = 0` (reads `X̂_{t+1}`), each scaled by `√2`.
fn coupling_operators(
    num_states: &[usize],
    layout: SvecLayout,
) -> (SparseMatrix, SparseMatrix, SparseMatrix, DVector<f64>) {
    let n: usize = num_states.iter().sum();
    let z_len: usize = num_states.iter().map(|k| k * k).sum();
    let rows = 2 * n;
    let sqrt2 = std::f64::consts::SQRT_2;
    let (mut bb, mut cc, mut ee) = (Vec::new(), Vec::new(), Vec::new());
    let mut row = 0;
    let mut x_offset = 1;
    let mut z_offset = 0;
    for &k in num_states {
        for from in 0..k {
            for to in 0..k {
                cc.push((row + from, z_offset + vec_index(from, to, k), sqrt2));
            }
            bb.push((row + from, layout.index(0, x_offset + from), -1.0));
        }
        row += k;
        for to in 0..k {
            for from in 0..k {
                cc.push((row + to, z_offset + vec_index(from, to, k), sqrt2));
            }
            ee.push((row + to, layout.index(0, x_offset + to), -1.0));
        }
        row += k;
        x_offset += k;
        z_offset += k * k;
    }
    (
        SparseMatrix::from_triplets(rows, layout.len(), bb),
        SparseMatrix::from_triplets(rows, z_len, cc),
        SparseMatrix::from_triplets(rows, layout.len(), ee),
        DVector::zeros(rows),
    )
}

/// Rank-one lift of an integral state sequence.
pub fn lift(states: &StateSequence, num_states: &[usize]) -> LiftedPoint {
    let len = states.len();
    let blocks = (0..len)
        .map(|t| LiftedBlock::from_vector(&states.one_hot(t, num_states)))
        .collect();
    let transitions = (0..len.saturating_sub(1))
        .map(|t| TransitionVector::from_states(states.row(t), states.row(t + 1), num_states))
        .collect();
    LiftedPoint {
        blocks,
        transitions,
    }
}

/// `Σ_t ⟨D_t, X̂_t⟩ + d_tᵀ z_t + offset`.
pub fn relaxed_objective(problem: &SdpBlockProblem, point: &LiftedPoint) -> Result<f64> {
    if point.blocks.len() != problem.len() || point.transitions.len() != problem.cost_linear.len() {
        return Err(FhmmError::Dimension(format!(
            "relaxed point has {} blocks / {} transitions, problem expects {} / {}",
            point.blocks.len(),
            point.transitions.len(),
            problem.len(),
            problem.cost_linear.len()
        )));
    }
    let layout = problem.layout();
    let mut total = problem.offset;
    for (block, cost) in point.blocks.iter().zip(&problem.cost_blocks) {
        if block.xhat.nrows() != layout.dim() {
            return Err(FhmmError::Dimension(
                "lifted block has the wrong size".into(),
            ));
        }
        total += layout.pack(&block.xhat).dot(cost);
    }
    for (z, cost) in point.transitions.iter().zip(&problem.cost_linear) {
        total += z.z.dot(cost);
    }
    Ok(total)
}
