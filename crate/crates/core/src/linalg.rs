//! Dense symmetric linear algebra used throughout the crate.
//!
//! Everything here works in `f64`. Kernel matrices are assembled in double
//! precision and every ridge solve goes through [`solve_psd`], which tries a
//! Cholesky factorization first and falls back to an eigendecomposition when
//! the factorization breaks down on a matrix that is positive definite but
//! badly conditioned.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Default relative singular-value cutoff for [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-10;

const EIGH_MAX_ITER: usize = 10_000;
const SYMMETRY_RTOL: f64 = 1e-12;

/// A dense symmetric matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, checking squareness, finiteness and symmetry within a
    /// relative tolerance of `1e-12`. The stored matrix is symmetrized
    /// exactly so downstream factorizations see a bitwise-symmetric input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::ShapeMismatch(format!(
                        "matrix is not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    /// Builds `(m + mᵀ)/2` without any tolerance check.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Solves `(A + ridge·I) X = B`.
pub fn solve_psd(a: &SymMatrix, b: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let n = a.order();
    if b.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve_psd: A is {n}x{n} but B has {} rows",
            b.nrows()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut m = a.0.clone();
    for i in 0..n {
        m[(i, i)] += ridge;
    }
    if let Some(chol) = m.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    // Cholesky broke down; retry through the spectrum.
    let (vals, vecs) = eigh(&SymMatrix(m))?;
    let top = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if vals.iter().any(|&v| v <= f64::EPSILON * top * n as f64 || v <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut proj = vecs.transpose() * b;
    for (i, mut row) in proj.row_iter_mut().enumerate() {
        row /= vals[i];
    }
    Ok(&vecs * proj)
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
///
/// Returns `(Λ, Q)` with `A = Q diag(Λ) Qᵀ`; column `k` of `Q` is the
/// eigenvector for `Λ[k]`.
pub fn eigh(a: &SymMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.order();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::try_new(a.0.clone(), f64::EPSILON, EIGH_MAX_ITER)
        .ok_or(Error::ConvergenceFailure(EIGH_MAX_ITER))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vals, vecs))
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond·σ_max` are
/// treated as zero.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let cutoff = rcond * s_max;
    let k = svd.singular_values.len();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            // out += v_i (1/s) u_iᵀ
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out.ger(1.0 / s, &vi, &ui, 1.0);
        }
    }
    out
}
