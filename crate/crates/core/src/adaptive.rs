//! Adaptive coarse-space construction: deluxe scaling, parallel sums, and
//! the per-edge generalized eigenproblems whose dominant eigenvectors become
//! primal constraints.
//!
//! For an edge `F` shared by subdomains `i` and `j`, with `S_F` the principal
//! edge blocks of the two subdomain Schur complements, `tilde S_F` the Schur
//! complements of the full local matrices onto `F`, and deluxe scalings
//! `D_i = (S_F^i + S_F^j)^{-1} S_F^i`, `D_j = I - D_i`, the eigenproblem is
//!
//! ```text
//! (D_j^T S_F^i D_j + D_i^T S_F^j D_i) v = lambda (tilde S_F^i : tilde S_F^j) v
//! ```
//!
//! where `A : B = A (A + B)^+ B` is the parallel sum. Large eigenvalues mark
//! the edge functions the interface problem handles worst; constraining them
//! (via a change of basis, see the preconditioner module) bounds the
//! preconditioned spectrum. The constraint handed onward for an eigenvector
//! `v` is `c = (tilde S_F^i : tilde S_F^j) v`, i.e. the right-hand operator
//! applied to the eigenvector.
//!
//! Everything here is deterministic: eigenvectors are canonicalized (unit
//! norm, fixed sign convention, fixed tie order) so that repeated runs and
//! the surrogate's training targets are reproducible bit for bit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{self, EigenDecomposition, SpdFactor, SymMatrix};

/// Relative asymmetry tolerated in the assembled eigenproblem sides before
/// symmetrization.
pub const EIGENPROBLEM_SYMMETRY_TOL: f64 = 1e-10;

/// Relative eigenvalue gap below which adjacent modes at the selection
/// boundary are flagged as near-degenerate.
pub const NEAR_DEGENERATE_GAP: f64 = 1e-8;

/// Norm below which a vector cannot be canonicalized (used by the surrogate
/// evaluation path to detect unusable predictions).
pub const CANONICAL_MIN_NORM: f64 = 1e-12;

/// Deluxe scaling pair for an edge: `D_i = (S_i + S_j)^{-1} S_i` and its
/// complement `D_j = I - D_i`, so the partition of unity holds exactly.
pub fn deluxe_scaling(s_i: &SymMatrix, s_j: &SymMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if s_i.dim() != s_j.dim() {
        return Err(Error::DimensionMismatch {
            detail: format!("deluxe scaling with blocks {}x{}", s_i.dim(), s_j.dim()),
        });
    }
    let sum = SymMatrix::symmetrized(s_i.as_matrix() + s_j.as_matrix());
    let factor = SpdFactor::new(&sum, "edge block sum for deluxe scaling")?;
    let d_i = factor.solve_mat(s_i.as_matrix());
    let d_j = DMatrix::identity(d_i.nrows(), d_i.ncols()) - &d_i;
    Ok((d_i, d_j))
}

/// Parallel sum `A : B = A (A + B)^+ B`, symmetric in its arguments and
/// Loewner-dominated by each: `A : B <= A` and `A : B <= B`. For scalars it
/// reduces to the harmonic mean halved, `a b / (a + b)`.
pub fn parallel_sum(a: &SymMatrix, b: &SymMatrix) -> Result<SymMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            detail: format!("parallel sum of {}x{} and {}x{}", a.dim(), a.dim(), b.dim(), b.dim()),
        });
    }
    let sum = SymMatrix::symmetrized(a.as_matrix() + b.as_matrix());
    let pinv = kernels::pseudo_inverse(&sum, kernels::REL_RANK_TOL)?;
    let product = a.as_matrix() * pinv.as_matrix() * b.as_matrix();
    Ok(SymMatrix::symmetrized(product))
}

/// All per-edge operators needed by the eigenproblem and the preconditioner.
#[derive(Debug, Clone)]
pub struct EdgeOperators {
    pub edge: usize,
    /// Principal edge blocks of the two subdomain Schur complements.
    pub s_block: (SymMatrix, SymMatrix),
    /// Schur complements of the subdomain Schur complements onto the edge.
    pub s_edge: (SymMatrix, SymMatrix),
    /// Deluxe scalings; `d.0 + d.1 = I` exactly.
    pub d: (DMatrix<f64>, DMatrix<f64>),
    /// Parallel sum of the edge Schur complements (eigenproblem right side,
    /// and the operator that turns eigenvectors into constraints).
    pub psum: SymMatrix,
    /// Eigenproblem left side.
    pub lhs: SymMatrix,
}

impl EdgeOperators {
    pub fn len(&self) -> usize {
        self.psum.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.psum.dim() == 0
    }

    /// Constraint vector for an (already canonical) eigenvector.
    pub fn constraint_for(&self, v: &DVector<f64>) -> DVector<f64> {
        self.psum.as_matrix() * v
    }
}

/// Assemble the edge operators from the two neighboring subdomain Schur
/// complements. `offset`/`len` locate the edge block inside each local
/// interface vector; the node order within the block is the canonical edge
/// order on both sides, so no permutation is involved.
pub fn edge_operators(
    edge: usize,
    s_i: &SymMatrix,
    offset_i: usize,
    s_j: &SymMatrix,
    offset_j: usize,
    len: usize,
) -> Result<EdgeOperators> {
    let idx_i: Vec<usize> = (offset_i..offset_i + len).collect();
    let idx_j: Vec<usize> = (offset_j..offset_j + len).collect();
    let block_i = s_i.principal_submatrix(&idx_i);
    let block_j = s_j.principal_submatrix(&idx_j);
    let edge_i = kernels::schur_onto(s_i, &idx_i, "subdomain Schur complement onto edge")?;
    let edge_j = kernels::schur_onto(s_j, &idx_j, "subdomain Schur complement onto edge")?;
    let (d_i, d_j) = deluxe_scaling(&block_i, &block_j)?;

    // lhs = D_j^T S_F^i D_j + D_i^T S_F^j D_i; symmetric up to the solve
    // error inside the scalings, gated before symmetrization.
    let lhs_raw = d_j.tr_mul(block_i.as_matrix()) * &d_j + d_i.tr_mul(block_j.as_matrix()) * &d_i;
    let lhs = SymMatrix::with_tolerance(lhs_raw, EIGENPROBLEM_SYMMETRY_TOL)?;
    let psum_raw = parallel_sum(&edge_i, &edge_j)?;
    let psum = SymMatrix::with_tolerance(psum_raw.into_matrix(), EIGENPROBLEM_SYMMETRY_TOL)?;

    Ok(EdgeOperators {
        edge,
        s_block: (block_i, block_j),
        s_edge: (edge_i, edge_j),
        d: (d_i, d_j),
        psum,
        lhs,
    })
}

/// Solve the generalized edge eigenproblem; eigenvalues descending,
/// eigenvectors orthonormal against the parallel sum.
pub fn edge_eigenproblem(ops: &EdgeOperators) -> Result<EigenDecomposition> {
    kernels::gen_sym_eig(&ops.lhs, &ops.psum, kernels::REL_RANK_TOL)
}

/// How many dominant eigenvectors to keep per edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    /// Exactly `k` on every edge; errors if fewer are available.
    FixedCount(usize),
    /// All eigenvalues at or above the threshold.
    Threshold(f64),
}

/// Constraints selected for one edge.
#[derive(Debug, Clone)]
pub struct EdgeConstraints {
    pub edge: usize,
    /// Selected eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Canonicalized eigenvectors (unit norm, canonical sign and order).
    pub vectors: Vec<DVector<f64>>,
    /// Constraint vectors `c = psum * v`, same order as `vectors`.
    pub constraints: Vec<DVector<f64>>,
    /// True when the eigenvalue gap at or inside the selection boundary is
    /// below [`NEAR_DEGENERATE_GAP`] relative to the local scale; selection
    /// remains deterministic thanks to canonical ordering, but the flag marks
    /// samples where the surrogate's target is ill-conditioned.
    pub near_degenerate: bool,
}

/// Complete per-edge constraint collection for one coefficient realization,
/// in edge-id order.
#[derive(Debug, Clone)]
pub struct AdaptiveConstraintSet {
    pub edges: Vec<EdgeConstraints>,
}

impl AdaptiveConstraintSet {
    pub fn counts(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.constraints.len()).collect()
    }

    /// Total number of constraint entries (the surrogate's output dimension
    /// contribution per sample when concatenating eigenvectors).
    pub fn total_vector_len(&self) -> usize {
        self.edges
            .iter()
            .map(|e| e.vectors.iter().map(|v| v.len()).sum::<usize>())
            .sum()
    }
}

/// Canonicalize a single vector: unit Euclidean norm with the sign chosen so
/// the largest-magnitude entry is positive (first such entry on exact-tie
/// magnitudes). Returns `None` when the norm is below
/// [`CANONICAL_MIN_NORM`].
///
/// Vectors already at unit norm are not rescaled (the division is skipped
/// within a few ulps of 1), so the map is idempotent bit for bit.
pub fn canonicalize_vector(v: &DVector<f64>) -> Option<DVector<f64>> {
    let norm = v.norm();
    if !norm.is_finite() || norm < CANONICAL_MIN_NORM {
        return None;
    }
    let mut out = v.clone();
    if (norm - 1.0).abs() > 32.0 * f64::EPSILON {
        out /= norm;
    }
    // Sign convention: scan for the entry of largest magnitude; the first
    // one encountered wins ties, and it is made positive.
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (k, &x) in out.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = k;
        }
    }
    if out[best] < 0.0 {
        out.neg_mut();
    }
    Some(out)
}

/// Select the dominant eigenpairs of an edge eigenproblem and canonicalize
/// them. Ordering is eigenvalue-descending with exact ties broken by
/// lexicographic comparison of the canonical vectors (larger first), making
/// the output independent of the eigensolver's internal ordering choices.
pub fn select_dominant(
    edge: usize,
    eig: &EigenDecomposition,
    rule: SelectionRule,
) -> Result<(Vec<f64>, Vec<DVector<f64>>, bool)> {
    let available = eig.values.len();
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..available)
        .map(|k| {
            let v = DVector::from_column_slice(eig.vectors.column(k).as_slice());
            let canon = canonicalize_vector(&v).ok_or_else(|| Error::EigenValidation {
                detail: format!("eigenvector {k} on edge {edge} has negligible norm"),
            })?;
            Ok((eig.values[k], canon))
        })
        .collect::<Result<_>>()?;
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("eigenvalues must be finite")
            .then_with(|| {
                // Exact eigenvalue tie: lexicographically larger vector first.
                for (x, y) in a.1.iter().zip(b.1.iter()) {
                    match y.partial_cmp(x).expect("vector entries must be finite") {
                        std::cmp::Ordering::Equal => continue,
                        ord => return ord,
                    }
                }
                std::cmp::Ordering::Equal
            })
    });

    let keep = match rule {
        SelectionRule::FixedCount(k) => {
            if k > available {
                return Err(Error::NotEnoughEigenvectors {
                    edge,
                    requested: k,
                    available,
                });
            }
            k
        }
        SelectionRule::Threshold(theta) => pairs.iter().take_while(|p| p.0 >= theta).count(),
    };

    // Near-degenerate when any adjacent pair inside the selection, or the
    // pair straddling the cut, has a tiny relative gap.
    let mut near_degenerate = false;
    for m in 0..keep.min(available.saturating_sub(1)) {
        let (a, b) = (pairs[m].0, pairs[m + 1].0);
        let scale = a.abs().max(b.abs()).max(1e-300);
        if (a - b).abs() < NEAR_DEGENERATE_GAP * scale {
            near_degenerate = true;
        }
    }

    let mut values = Vec::with_capacity(keep);
    let mut vectors = Vec::with_capacity(keep);
    for (lambda, v) in pairs.into_iter().take(keep) {
        values.push(lambda);
        vectors.push(v);
    }
    Ok((values, vectors, near_degenerate))
}

/// Full adaptive pipeline for one edge: eigenproblem, dominant selection,
/// canonicalization, constraint vectors.
pub fn edge_constraints(ops: &EdgeOperators, rule: SelectionRule) -> Result<EdgeConstraints> {
    let eig = edge_eigenproblem(ops)?;
    let (eigenvalues, vectors, near_degenerate) = select_dominant(ops.edge, &eig, rule)?;
    let constraints = vectors.iter().map(|v| ops.constraint_for(v)).collect();
    Ok(EdgeConstraints {
        edge: ops.edge,
        eigenvalues,
        vectors,
        constraints,
        near_degenerate,
    })
}
