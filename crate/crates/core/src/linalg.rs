//! Small dense and sparse kernels used by the relaxation and the solver.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FhmmError, Result};

const EIG_EPS: f64 = 1e-14;
const EIG_MAX_ITER: usize = 10_000;

/// Relative cutoff below which eigenvalues count as zero.
pub const EIG_ZERO_REL: f64 = 1e-12;

/// Symmetric-matrix vectorization: upper triangle row by row, with
/// off-diagonal entries scaled by `√2` so that `⟨A, B⟩ = svec(A)ᵀ svec(B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvecLayout {
    dim: usize,
}

impl SvecLayout {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Side length of the symmetric matrices.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the svec vector, `d(d+1)/2`.
    pub fn len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Position of entry `(i, j)`; order of the indices does not matter.
    pub fn index(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        r * self.dim - r * r.saturating_sub(1) / 2 + (c - r)
    }

    /// Coefficient that maps the matrix entry `(i, j)` onto its svec slot.
    pub fn scale(i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            std::f64::consts::SQRT_2
        }
    }

    pub fn pack(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        let mut k = 0;
        for i in 0..self.dim {
            for j in i..self.dim {
                v[k] = if i == j {
                    m[(i, i)]
                } else {
                    0.5 * (m[(i, j)] + m[(j, i)]) * std::f64::consts::SQRT_2
                };
                k += 1;
            }
        }
        v
    }

    pub fn unpack(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        let mut k = 0;
        for i in 0..self.dim {
            for j in i..self.dim {
                if i == j {
                    m[(i, i)] = v[k];
                } else {
                    let e = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                    m[(i, j)] = e;
                    m[(j, i)] = e;
                }
                k += 1;
            }
        }
        m
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// One stored entry, as written to problem dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(
                r < rows && c < cols,
                "triplet ({r}, {c}) outside {rows}x{cols}"
            );
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push(Triplet {
                    row: r,
                    col: self.col_idx[k],
                    value: self.values[k],
                });
            }
        }
        out
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.cols);
        DVector::from_fn(self.rows, |r, _| {
            (self.row_ptr[r]..self.row_ptr[r + 1])
                .map(|k| self.values[k] * x[self.col_idx[k]])
                .sum()
        })
    }

    /// `y += alpha · Aᵀ x`.
    pub fn tmul_acc(&self, x: &DVector<f64>, alpha: f64, y: &mut DVector<f64>) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for r in 0..self.rows {
            let xr = alpha * x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k] * xr;
            }
        }
    }

    /// `Aᵀ x`.
    pub fn tmul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.cols);
        self.tmul_acc(x, 1.0, &mut y);
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for t in self.triplets() {
            m[(t.row, t.col)] += t.value;
        }
        m
    }

    /// Dense `A Aᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let dense = self.to_dense();
        &dense * dense.transpose()
    }
}

fn symmetric_eigen(
    a: &DMatrix<f64>,
    what: &'static str,
) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FhmmError::Numerical {
            t: 0,
            variable: what,
            detail: "matrix has non-finite entries".into(),
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    let norm = sym.norm();
    sym.clone()
        .try_symmetric_eigen(EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| FhmmError::Numerical {
            t: 0,
            variable: what,
            detail: format!(
                "symmetric eigendecomposition did not converge ({}x{}, Frobenius norm {norm:e}, max |entry| {:e})",
                sym.nrows(),
                sym.ncols(),
                sym.amax()
            ),
        })
}

fn zero_cutoff(eigenvalues: &DVector<f64>) -> f64 {
    EIG_ZERO_REL * eigenvalues.amax().max(1.0)
}

/// Nearest positive semidefinite matrix in Frobenius norm: keep the
/// positive part of the spectrum of the symmetrized input.
pub fn psd_project(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a, "psd_project")?;
    let cutoff = zero_cutoff(&eig.eigenvalues);
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            out.ger(lambda, &v, &v, 1.0);
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Smallest eigenvalue of the symmetrized input.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let eig = symmetric_eigen(a, "min_eigenvalue")?;
    Ok(eig.eigenvalues.min())
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
pub fn symmetric_pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a, "pseudo_inverse")?;
    let cutoff = zero_cutoff(&eig.eigenvalues.abs());
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cutoff {
            let v = eig.eigenvectors.column(k);
            out.ger(1.0 / lambda, &v, &v, 1.0);
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}
