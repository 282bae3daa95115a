//! Dense symmetric linear-algebra primitives.
//!
//! Everything downstream (Schur complements, deluxe scaling, adaptive
//! eigenproblems, the coarse solve) funnels through the handful of routines in
//! this module, so they validate their own output: eigendecompositions are
//! checked for orthonormality and reconstruction before being returned, and
//! matrices claimed symmetric are gated on their actual asymmetry.
//!
//! The heavy lifting is delegated to `nalgebra` (symmetric QR iteration and
//! Cholesky); this module owns the tolerances, orderings and error reporting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Default relative truncation tolerance for pseudo-inverses and generalized
/// eigenproblem deflation: eigenvalues below `REL_RANK_TOL * lambda_max` are
/// treated as zero.
pub const REL_RANK_TOL: f64 = 1e-12;

/// Relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A square matrix guaranteed symmetric.
///
/// Construction either checks the asymmetry against a tolerance and rejects
/// the matrix ([`SymMatrix::new`], [`SymMatrix::with_tolerance`]) or accepts
/// any square matrix whose symmetry is guaranteed by the surrounding algebra
/// up to roundoff ([`SymMatrix::symmetrized`]). In all cases the stored matrix
/// is explicitly symmetrized, so `m[(i, j)] == m[(j, i)]` holds bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    /// Checked constructor with the default tolerance [`SYMMETRY_TOL`]
    /// (relative to the largest entry in absolute value).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(m, SYMMETRY_TOL)
    }

    /// Checked constructor with a caller-chosen relative tolerance.
    pub fn with_tolerance(m: DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let scale = m.amax();
        let asymmetry = max_asymmetry(&m);
        if asymmetry > rel_tol * scale {
            return Err(Error::NotSymmetric {
                dim: m.nrows(),
                asymmetry,
                tolerance: rel_tol * scale,
            });
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrize `(m + m^T) / 2` without a tolerance gate.
    ///
    /// Use only where the algebra guarantees symmetry up to roundoff (e.g. a
    /// Schur complement of a symmetric matrix computed with a factored solve,
    /// whose asymmetry scales with the solve's backward error).
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetrized() needs a square matrix");
        let mut data = m;
        let n = data.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (data[(i, j)] + data[(j, i)]);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    /// Identity matrix of dimension `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            data: DMatrix::identity(n, n),
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            data: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Largest entry in absolute value (0 for the empty matrix).
    pub fn max_abs(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.amax()
        }
    }

    /// Principal submatrix on the given indices.
    pub fn principal_submatrix(&self, idx: &[usize]) -> SymMatrix {
        let data = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.data[(idx[i], idx[j])]);
        SymMatrix { data }
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, ij: (usize, usize)) -> &f64 {
        &self.data[ij]
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition `A = Q diag(values) Q^T` of a symmetric matrix, or the
/// pencil decomposition produced by [`gen_sym_eig`] (where the columns of
/// `vectors` are B-orthonormal instead).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Eigenvalues; ascending for [`sym_eig`], descending for [`gen_sym_eig`].
    pub values: DVector<f64>,
    /// Eigenvectors as columns, ordered to match `values`.
    pub vectors: DMatrix<f64>,
}

const EIG_MAX_SWEEPS: usize = 500;
const ORTHONORMALITY_TOL: f64 = 1e-10;
const RECONSTRUCTION_TOL: f64 = 1e-9;

/// Full eigendecomposition of a symmetric matrix, eigenvalues ascending.
///
/// The decomposition is validated before being returned: `Q^T Q` must match
/// the identity to `1e-10` and `Q diag(v) Q^T` must reproduce `A` to
/// `1e-9` relative to its largest entry. A failed validation is reported as a
/// diagnostic error rather than silently returning garbage.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let scale = a.max_abs();
    let eig = nalgebra::linalg::SymmetricEigen::try_new(a.data.clone(), f64::EPSILON, EIG_MAX_SWEEPS)
        .ok_or(Error::EigenNoConvergence { dim: n, scale })?;

    // Sort ascending by eigenvalue; ties keep the solver's relative order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("eigenvalues must be finite")
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }

    validate_eig(a, &values, &vectors, scale)?;
    Ok(EigenDecomposition { values, vectors })
}

fn validate_eig(
    a: &SymMatrix,
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    scale: f64,
) -> Result<()> {
    let n = a.dim();
    let gram = vectors.tr_mul(vectors);
    let ortho_err = (gram - DMatrix::identity(n, n)).amax();
    if ortho_err > ORTHONORMALITY_TOL {
        return Err(Error::EigenValidation {
            detail: format!("eigenvector orthonormality error {ortho_err:.3e} (dim {n})"),
        });
    }
    let mut recon = vectors.clone();
    for j in 0..n {
        let mut col = recon.column_mut(j);
        col *= values[j];
    }
    let recon_err = (recon * vectors.transpose() - &a.data).amax();
    let bound = RECONSTRUCTION_TOL * scale.max(1e-300);
    if recon_err > bound {
        return Err(Error::EigenValidation {
            detail: format!("reconstruction error {recon_err:.3e} exceeds {bound:.3e} (dim {n})"),
        });
    }
    Ok(())
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix by spectral truncation.
///
/// Eigenvalues with `|lambda| <= rel_tol * max|lambda|` are treated as zero
/// and excluded from the inversion; pass [`REL_RANK_TOL`] unless a specific
/// deflation level is required.
pub fn pseudo_inverse(a: &SymMatrix, rel_tol: f64) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    let n = a.dim();
    let cutoff = rel_tol * eig.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut result = DMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = eig.values[k];
        if lambda.abs() > cutoff {
            let q = eig.vectors.column(k);
            // result += q q^T / lambda
            result.ger(1.0 / lambda, &q, &q, 1.0);
        }
    }
    Ok(SymMatrix::symmetrized(result))
}

/// Generalized symmetric eigenproblem `A v = lambda B v` with `A` symmetric
/// and `B` symmetric positive semidefinite.
///
/// The pencil is reduced with a spectral square root of `B`: eigenvectors of
/// `B` with eigenvalue below `rel_tol * lambda_max(B)` span the deflated
/// nullspace and are dropped. Returned eigenvalues are sorted **descending**
/// (the adaptive constraint selection wants dominant modes first) and the
/// eigenvector columns are B-orthonormal: `V^T B V = I` on the retained
/// subspace.
pub fn gen_sym_eig(a: &SymMatrix, b: &SymMatrix, rel_tol: f64) -> Result<EigenDecomposition> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "generalized eigenproblem with A {}x{} and B {}x{}",
                a.dim(),
                a.dim(),
                b.dim(),
                b.dim()
            ),
        });
    }
    let beig = sym_eig(b)?;
    let n = b.dim();
    let bmax = beig.values.iter().fold(0.0f64, |m, &v| m.max(v));
    let cutoff = rel_tol * bmax;
    let kept: Vec<usize> = (0..n).filter(|&k| beig.values[k] > cutoff).collect();
    if kept.is_empty() {
        return Err(Error::DegenerateRhs {
            context: format!("{n}x{n} pencil"),
        });
    }

    // W = Q_r diag(lambda_r^{-1/2}); columns are a B-orthonormal basis of the
    // retained subspace, and the pencil restricted to it becomes the ordinary
    // symmetric problem W^T A W.
    let mut w = DMatrix::zeros(n, kept.len());
    for (c, &k) in kept.iter().enumerate() {
        let scale = 1.0 / beig.values[k].sqrt();
        w.set_column(c, &(beig.vectors.column(k) * scale));
    }
    let reduced = SymMatrix::symmetrized(w.tr_mul(&a.data) * &w);
    let inner = sym_eig(&reduced)?;

    let m = kept.len();
    // Ascending from sym_eig; flip to descending.
    let values = DVector::from_fn(m, |i, _| inner.values[m - 1 - i]);
    let mut vectors = DMatrix::zeros(n, m);
    for i in 0..m {
        vectors.set_column(i, &(&w * inner.vectors.column(m - 1 - i)));
    }
    Ok(EigenDecomposition { values, vectors })
}

/// A Cholesky factorization of a symmetric positive definite matrix, retained
/// for repeated solves.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    /// Factor `a`; fails with a context-carrying error if `a` is not SPD.
    pub fn new(a: &SymMatrix, context: &str) -> Result<Self> {
        let dim = a.dim();
        let chol = Cholesky::new(a.data.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
        })?;
        Ok(Self { chol, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// Lower Cholesky factor `L` with `A = L L^T`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// One-shot SPD solve; prefer [`SpdFactor`] when the factorization is reused.
pub fn solve_spd(a: &SymMatrix, rhs: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    if a.dim() != rhs.len() {
        return Err(Error::DimensionMismatch {
            detail: format!("solve_spd: matrix {}x{}, rhs {}", a.dim(), a.dim(), rhs.len()),
        });
    }
    Ok(SpdFactor::new(a, context)?.solve_vec(rhs))
}

/// Schur complement onto the index set `keep`, eliminating its complement:
/// `S = A[keep, keep] - A[keep, elim] A[elim, elim]^{-1} A[elim, keep]`.
///
/// The eliminated block must be SPD (it is factored); the result is
/// explicitly symmetrized since the factored solve only preserves symmetry up
/// to its backward error.
pub fn schur_onto(a: &SymMatrix, keep: &[usize], context: &str) -> Result<SymMatrix> {
    let n = a.dim();
    let mut is_kept = vec![false; n];
    for &k in keep {
        if k >= n {
            return Err(Error::DimensionMismatch {
                detail: format!("schur_onto: index {k} out of range for dim {n}"),
            });
        }
        if std::mem::replace(&mut is_kept[k], true) {
            return Err(Error::DimensionMismatch {
                detail: format!("schur_onto: duplicate index {k}"),
            });
        }
    }
    let elim: Vec<usize> = (0..n).filter(|&i| !is_kept[i]).collect();
    if elim.is_empty() {
        return Ok(a.principal_submatrix(keep));
    }
    let a_ee = a.principal_submatrix(&elim);
    let a_ek = DMatrix::from_fn(elim.len(), keep.len(), |i, j| a.data[(elim[i], keep[j])]);
    let a_kk = a.principal_submatrix(keep);
    let factor = SpdFactor::new(&a_ee, context)?;
    let x = factor.solve_mat(&a_ek);
    let product = a_ek.tr_mul(&x);
    Ok(SymMatrix::symmetrized(a_kk.into_matrix() - product))
}
