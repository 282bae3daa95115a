//! BDDC preconditioner with an adaptive primal space, applied through a
//! change of basis, plus preconditioned conjugate gradients with Lanczos
//! Ritz estimates of the preconditioned spectrum.
//!
//! # Change of basis
//!
//! Each edge constraint `c` ("the weighted average `c^T w_F` is continuous
//! across the edge") is turned into an explicit degree of freedom: per edge
//! an invertible `G_F` is built whose first `k` rows are the (normalized)
//! constraint vectors and whose remaining rows are an orthonormal complement.
//! In the transformed variables `w' = G_F w_F` the first `k` entries are the
//! constraint values, which join the cross vertices as primal unknowns; the
//! rest are dual and stay subdomain-local.
//!
//! # Preconditioner
//!
//! In the partially assembled space the preconditioner is the standard BDDC
//! two-level operator: independent dual-block solves, a coarse solve on the
//! primal unknowns (vertices + edge constraints) with harmonic-extension
//! corrections, glued with the transformed deluxe scalings. Its application
//! and the transformed assembled operator `sum_i R_i^T S'_i R_i` are what PCG
//! iterates on; solutions are mapped back through `G_F^{-1}` at the end.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::adaptive::{AdaptiveConstraintSet, EdgeOperators};
use crate::decomp::{DofSpaces, InterfaceClasses};
use crate::error::{Error, Result};
use crate::kernels::{self, SpdFactor, SymMatrix};
use crate::schur::SubdomainSystem;

/// Residual fraction below which a constraint vector counts as linearly
/// dependent on its predecessors within the same edge (corresponds to a Gram
/// condition number around 1e12).
pub const DEPENDENCE_TOL: f64 = 1e-6;

/// Change-of-basis matrix for one edge.
#[derive(Debug, Clone)]
pub struct EdgeBasis {
    /// `w' = G w`; first `k` rows are normalized constraints.
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub k: usize,
}

/// A constraint removed by [`sanitize_constraints`] because it was linearly
/// dependent on earlier constraints of the same edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroppedConstraint {
    pub edge: usize,
    pub index: usize,
}

/// Drop linearly dependent constraint vectors edge by edge (keeping the
/// dominant ones, which come first). Returns the dropped positions so the
/// caller can log them; the surviving set always admits a change of basis.
pub fn sanitize_constraints(set: &mut AdaptiveConstraintSet) -> Vec<DroppedConstraint> {
    let mut dropped = Vec::new();
    for ec in &mut set.edges {
        let mut ortho: Vec<DVector<f64>> = Vec::new();
        let mut keep = vec![true; ec.constraints.len()];
        for (idx, c) in ec.constraints.iter().enumerate() {
            let norm = c.norm();
            let mut r = c.clone();
            for q in &ortho {
                let proj = q.dot(&r);
                r.axpy(-proj, q, 1.0);
            }
            if norm == 0.0 || r.norm() <= DEPENDENCE_TOL * norm {
                keep[idx] = false;
                dropped.push(DroppedConstraint {
                    edge: ec.edge,
                    index: idx,
                });
            } else {
                let rn = r.norm();
                ortho.push(r / rn);
            }
        }
        if keep.iter().any(|&k| !k) {
            let filter = |v: &mut Vec<_>| {
                let mut it = keep.iter();
                v.retain(|_| *it.next().unwrap());
            };
            filter(&mut ec.constraints);
            filter(&mut ec.vectors);
            let mut it = keep.iter();
            ec.eigenvalues.retain(|_| *it.next().unwrap());
        }
    }
    dropped
}

/// Build the change of basis for one edge of `m` nodes. The constraint list
/// must already be independent (run [`sanitize_constraints`] first); rows are
/// normalized to unit length to keep `G` well conditioned under the large
/// entry scales high-contrast coefficients produce.
pub fn change_of_basis(edge: usize, constraints: &[DVector<f64>], m: usize) -> Result<EdgeBasis> {
    let k = constraints.len();
    if k > m {
        return Err(Error::NotEnoughEigenvectors {
            edge,
            requested: k,
            available: m,
        });
    }
    let mut g = DMatrix::zeros(m, m);
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(m);
    for (row, c) in constraints.iter().enumerate() {
        if c.len() != m {
            return Err(Error::ConstraintLength {
                edge,
                got: c.len(),
                expected: m,
            });
        }
        let norm = c.norm();
        let mut r = c.clone();
        for q in &ortho {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= DEPENDENCE_TOL * norm {
            return Err(Error::Message(format!(
                "dependent constraint {row} on edge {edge} passed to change_of_basis"
            )));
        }
        g.row_mut(row).tr_copy_from(&(c / norm));
        ortho.push(r / rn);
    }
    // Orthonormal complement: greedy modified Gram-Schmidt over the identity.
    let mut row = k;
    for i in 0..m {
        if row == m {
            break;
        }
        let mut r = DVector::zeros(m);
        r[i] = 1.0;
        for q in &ortho {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let rn = r.norm();
        if rn > 1e-8 {
            let q = r / rn;
            g.row_mut(row).tr_copy_from(&q);
            ortho.push(q);
            row += 1;
        }
    }
    if row != m {
        return Err(Error::Message(format!(
            "could not complete change of basis on edge {edge}: {row} of {m} rows"
        )));
    }
    let g_inv = g.clone().try_inverse().ok_or_else(|| Error::Message(format!(
        "change of basis on edge {edge} is numerically singular"
    )))?;
    Ok(EdgeBasis { g, g_inv, k })
}

struct SubPre {
    /// Local interface index -> global interface slot.
    positions: Vec<usize>,
    /// Transformed local Schur complement `T_i^T S_i T_i`.
    s_t: DMatrix<f64>,
    /// Transformed scaling `D'_i` (edge blocks `G D G^{-1}`, vertex weights).
    d_t: DMatrix<f64>,
    primal_local: Vec<usize>,
    primal_global: Vec<usize>,
    dual_local: Vec<usize>,
    dual_factor: Option<SpdFactor>,
    /// `S'_{dual, primal}` block.
    s_dual_primal: DMatrix<f64>,
}

/// The assembled-operator + preconditioner pair for one realization, in the
/// transformed (partially assembled) interface variables.
pub struct BddcPreconditioner {
    n_interface: usize,
    n_primal: usize,
    /// Per edge id; `None` for edges without constraints (identity basis).
    edge_bases: Vec<Option<EdgeBasis>>,
    /// Offset and length of every edge block in the interface vector.
    edge_slices: Vec<(usize, usize)>,
    subs: Vec<SubPre>,
    coarse: Option<SpdFactor>,
}

/// Build the BDDC preconditioner.
///
/// `constraints` must be sanitized and `dofs` must be the layout built from
/// the same constraint set; `edge_ops` supplies the deluxe scalings (in
/// edge-id order, matching `classes.edges`).
pub fn build_preconditioner(
    subs: &[SubdomainSystem],
    dofs: &DofSpaces,
    classes: &InterfaceClasses,
    edge_ops: &[EdgeOperators],
    constraints: &AdaptiveConstraintSet,
) -> Result<BddcPreconditioner> {
    let n_edges = classes.edges.len();
    if edge_ops.len() != n_edges || constraints.edges.len() != n_edges {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "{} edge operators / {} constraint edges for {} interface edges",
                edge_ops.len(),
                constraints.edges.len(),
                n_edges
            ),
        });
    }

    // Change of basis per edge.
    let mut edge_bases: Vec<Option<EdgeBasis>> = Vec::with_capacity(n_edges);
    for edge in &classes.edges {
        let ec = &constraints.edges[edge.id];
        if ec.constraints.len() != dofs.constraint_counts[edge.id] {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "edge {}: {} constraints but layout expects {}",
                    edge.id,
                    ec.constraints.len(),
                    dofs.constraint_counts[edge.id]
                ),
            });
        }
        if ec.constraints.is_empty() {
            edge_bases.push(None);
        } else {
            edge_bases.push(Some(change_of_basis(
                edge.id,
                &ec.constraints,
                edge.nodes.len(),
            )?));
        }
    }
    let edge_slices: Vec<(usize, usize)> = classes
        .edges
        .iter()
        .map(|e| (dofs.edge_offsets[e.id], e.nodes.len()))
        .collect();

    let mut sub_pres = Vec::with_capacity(subs.len());
    let mut coarse = DMatrix::zeros(dofs.n_primal, dofs.n_primal);
    let mut coarse_contribs: Vec<(usize, SymMatrix, Vec<usize>)> = Vec::new();

    for (s, sub) in subs.iter().enumerate() {
        let sd = &dofs.subdomains[s];
        let m = sd.len();

        // T_i = blockdiag(G_F^{-1}, 1 at vertices); D'_i likewise from
        // G_F D_F G_F^{-1} and the vertex multiplicity weights.
        let mut t = DMatrix::identity(m, m);
        let mut d_t = DMatrix::zeros(m, m);
        for er in &sd.edges {
            let ops = &edge_ops[er.edge];
            if ops.len() != er.len {
                return Err(Error::DimensionMismatch {
                    detail: format!(
                        "edge {} operators have size {}, layout expects {}",
                        er.edge,
                        ops.len(),
                        er.len
                    ),
                });
            }
            let is_first = classes.edges[er.edge].subdomains.0 == s;
            let d_edge = if is_first { &ops.d.0 } else { &ops.d.1 };
            let (d_block, t_block) = match &edge_bases[er.edge] {
                Some(basis) => (&basis.g * d_edge * &basis.g_inv, Some(&basis.g_inv)),
                None => (d_edge.clone(), None),
            };
            for a in 0..er.len {
                for b in 0..er.len {
                    d_t[(er.offset + a, er.offset + b)] = d_block[(a, b)];
                    if let Some(gi) = t_block {
                        t[(er.offset + a, er.offset + b)] = gi[(a, b)];
                    }
                }
            }
        }
        for vr in &sd.vertices {
            let mult = classes.vertices[vr.vertex].sharers.len() as f64;
            d_t[(vr.offset, vr.offset)] = 1.0 / mult;
        }

        let s_t = t.tr_mul(sub.schur().as_matrix()) * &t;

        // Primal/dual split in local transformed numbering.
        let mut primal_local = Vec::new();
        let mut primal_global = Vec::new();
        let mut dual_local = Vec::new();
        for er in &sd.edges {
            let k = dofs.constraint_counts[er.edge];
            for slot in 0..er.len {
                if slot < k {
                    primal_local.push(er.offset + slot);
                    primal_global.push(dofs.edge_constraint_primal_id(er.edge, slot));
                } else {
                    dual_local.push(er.offset + slot);
                }
            }
        }
        for vr in &sd.vertices {
            primal_local.push(vr.offset);
            primal_global.push(dofs.vertex_primal_id(vr.vertex));
        }

        let nd = dual_local.len();
        let np = primal_local.len();
        let s_dd = SymMatrix::symmetrized(DMatrix::from_fn(nd, nd, |i, j| {
            s_t[(dual_local[i], dual_local[j])]
        }));
        let s_dual_primal =
            DMatrix::from_fn(nd, np, |i, j| s_t[(dual_local[i], primal_local[j])]);
        let dual_factor = if nd > 0 {
            Some(
                SpdFactor::new(&s_dd, &format!("dual block of subdomain {s}"))
                    .map_err(|_| Error::DualBlockNotSpd { subdomain: s })?,
            )
        } else {
            None
        };

        // Coarse contribution: S'_PP - S'_PD S'_DD^{-1} S'_DP.
        let s_pp = DMatrix::from_fn(np, np, |i, j| s_t[(primal_local[i], primal_local[j])]);
        let contrib = match &dual_factor {
            Some(f) if nd > 0 => {
                let x = f.solve_mat(&s_dual_primal);
                SymMatrix::symmetrized(s_pp - s_dual_primal.tr_mul(&x))
            }
            _ => SymMatrix::symmetrized(s_pp),
        };
        for (li, &gi) in primal_global.iter().enumerate() {
            for (lj, &gj) in primal_global.iter().enumerate() {
                coarse[(gi, gj)] += contrib[(li, lj)];
            }
        }
        coarse_contribs.push((s, contrib, primal_global.clone()));

        sub_pres.push(SubPre {
            positions: sd.interface_positions.clone(),
            s_t,
            d_t,
            primal_local,
            primal_global,
            dual_local,
            dual_factor,
            s_dual_primal,
        });
    }

    let coarse_factor = if dofs.n_primal > 0 {
        match SpdFactor::new(&SymMatrix::symmetrized(coarse), "assembled coarse matrix") {
            Ok(f) => Some(f),
            Err(_) => {
                // Identify an offending subdomain for the diagnostic: one
                // whose own contribution is indefinite.
                for (s, contrib, _) in &coarse_contribs {
                    if let Ok(eig) = kernels::sym_eig(contrib) {
                        let scale = contrib.max_abs().max(1e-300);
                        if eig.values[0] < -1e-10 * scale {
                            return Err(Error::CoarseNotSpd { subdomain: *s });
                        }
                    }
                }
                return Err(Error::CoarseNotSpd {
                    subdomain: usize::MAX,
                });
            }
        }
    } else {
        None
    };

    Ok(BddcPreconditioner {
        n_interface: dofs.n_interface(),
        n_primal: dofs.n_primal,
        edge_bases,
        edge_slices,
        subs: sub_pres,
        coarse: coarse_factor,
    })
}

impl BddcPreconditioner {
    pub fn interface_size(&self) -> usize {
        self.n_interface
    }

    pub fn primal_size(&self) -> usize {
        self.n_primal
    }

    /// Map an interface right-hand side into the transformed variables:
    /// `g'_F = G_F^{-T} g_F` per edge, vertices unchanged.
    pub fn transform_rhs(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut out = g.clone();
        for (basis, &(offset, len)) in self.edge_bases.iter().zip(&self.edge_slices) {
            if let Some(basis) = basis {
                let block = g.rows(offset, len).into_owned();
                let transformed = basis.g_inv.tr_mul(&block);
                out.rows_mut(offset, len).copy_from(&transformed);
            }
        }
        out
    }

    /// Map a transformed interface solution back: `w_F = G_F^{-1} w'_F`.
    pub fn untransform_solution(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = w.clone();
        for (basis, &(offset, len)) in self.edge_bases.iter().zip(&self.edge_slices) {
            if let Some(basis) = basis {
                let block = w.rows(offset, len).into_owned();
                out.rows_mut(offset, len).copy_from(&(&basis.g_inv * block));
            }
        }
        out
    }

    /// Assembled interface operator in transformed variables:
    /// `sum_i R_i^T S'_i R_i x`.
    pub fn apply_operator(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n_interface);
        for sub in &self.subs {
            let mut xl = DVector::zeros(sub.positions.len());
            for (l, &p) in sub.positions.iter().enumerate() {
                xl[l] = x[p];
            }
            let yl = &sub.s_t * xl;
            for (l, &p) in sub.positions.iter().enumerate() {
                y[p] += yl[l];
            }
        }
        y
    }

    /// Apply the BDDC preconditioner to a transformed residual.
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut result = DVector::zeros(self.n_interface);
        if self.n_interface == 0 {
            return result;
        }

        // Pass 1: weighted restriction, dual solves, coarse residual.
        let mut coarse_rhs = DVector::zeros(self.n_primal);
        let mut z_locals = Vec::with_capacity(self.subs.len());
        let mut x_duals = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            let mut rl = DVector::zeros(sub.positions.len());
            for (l, &p) in sub.positions.iter().enumerate() {
                rl[l] = r[p];
            }
            let z = sub.d_t.tr_mul(&rl);
            let z_dual = DVector::from_fn(sub.dual_local.len(), |i, _| z[sub.dual_local[i]]);
            let x_dual = match &sub.dual_factor {
                Some(f) => f.solve_vec(&z_dual),
                None => z_dual.clone(),
            };
            for (li, &gp) in sub.primal_global.iter().enumerate() {
                coarse_rhs[gp] += z[sub.primal_local[li]];
            }
            if !sub.dual_local.is_empty() {
                let correction = sub.s_dual_primal.tr_mul(&x_dual);
                for (li, &gp) in sub.primal_global.iter().enumerate() {
                    coarse_rhs[gp] -= correction[li];
                }
            }
            z_locals.push(z);
            x_duals.push(x_dual);
        }

        let u_coarse = match &self.coarse {
            Some(f) => f.solve_vec(&coarse_rhs),
            None => coarse_rhs,
        };

        // Pass 2: dual corrections, combine, weight, assemble.
        for (sub, (z, x_dual)) in self.subs.iter().zip(z_locals.iter().zip(x_duals.iter())) {
            let mut w = DVector::zeros(sub.positions.len());
            let up_local = DVector::from_fn(sub.primal_global.len(), |i, _| {
                u_coarse[sub.primal_global[i]]
            });
            let u_dual = if sub.dual_local.is_empty() {
                x_dual.clone()
            } else {
                let rhs = &sub.s_dual_primal * &up_local;
                let corr = match &sub.dual_factor {
                    Some(f) => f.solve_vec(&rhs),
                    None => rhs,
                };
                x_dual - corr
            };
            for (li, &loc) in sub.primal_local.iter().enumerate() {
                w[loc] = up_local[li];
            }
            for (li, &loc) in sub.dual_local.iter().enumerate() {
                w[loc] = u_dual[li];
            }
            let weighted = &sub.d_t * w;
            for (l, &p) in sub.positions.iter().enumerate() {
                result[p] += weighted[l];
            }
            let _ = z;
        }
        result
    }
}

/// Convergence report of a PCG run.
#[derive(Debug, Clone, Serialize)]
pub struct PcgReport {
    pub iterations: usize,
    pub converged: bool,
    /// Preconditioned residual norms `sqrt(r^T z)`, one per iteration
    /// including the initial residual.
    pub residuals: Vec<f64>,
    /// Lanczos Ritz estimates of the extreme preconditioned eigenvalues
    /// (absent when the run converges without iterating).
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
}

/// Ratio of the Ritz extremes; errors when the run produced no estimates.
pub fn condition_estimate(report: &PcgReport) -> Result<f64> {
    match (report.lambda_min, report.lambda_max) {
        (Some(lo), Some(hi)) if lo > 0.0 => Ok(hi / lo),
        _ => Err(Error::Message(
            "PCG run produced no usable spectrum estimate".into(),
        )),
    }
}

/// Preconditioned conjugate gradients for SPD `A` and preconditioner `M`
/// (both given as operators). Stops when `sqrt(r^T z)` drops below
/// `tol * sqrt(r_0^T z_0)`; exceeding `max_iter` is an error. A zero
/// right-hand side returns immediately with zero iterations.
pub fn pcg_solve(
    apply_a: impl Fn(&DVector<f64>) -> DVector<f64>,
    apply_m: impl Fn(&DVector<f64>) -> DVector<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, PcgReport)> {
    let n = rhs.len();
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut z = apply_m(&r);
    let mut delta = r.dot(&z);
    if delta < 0.0 {
        return Err(Error::NotPositiveDefinite {
            context: "PCG preconditioner (r^T M r < 0)".into(),
        });
    }
    let delta0 = delta;
    let target = tol * delta0.sqrt();
    let mut residuals = vec![delta0.sqrt()];
    if delta0.sqrt() == 0.0 {
        return Ok((
            x,
            PcgReport {
                iterations: 0,
                converged: true,
                residuals,
                lambda_min: None,
                lambda_max: None,
            },
        ));
    }

    let mut p = z.clone();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for _ in 0..max_iter {
        let q = apply_a(&p);
        let pq = p.dot(&q);
        if pq <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "PCG operator (p^T A p <= 0)".into(),
            });
        }
        let alpha = delta / pq;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        z = apply_m(&r);
        let delta_new = r.dot(&z);
        if delta_new < 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "PCG preconditioner (r^T M r < 0)".into(),
            });
        }
        let beta = delta_new / delta;
        alphas.push(alpha);
        betas.push(beta);
        delta = delta_new;
        residuals.push(delta.sqrt());
        if delta.sqrt() <= target {
            let (lambda_min, lambda_max) = ritz_extremes(&alphas, &betas)?;
            return Ok((
                x,
                PcgReport {
                    iterations: alphas.len(),
                    converged: true,
                    residuals,
                    lambda_min,
                    lambda_max,
                },
            ));
        }
        p = &z + &p * beta;
    }
    Err(Error::PcgNoConvergence {
        max_iterations: max_iter,
        residual: delta.sqrt() / delta0.sqrt(),
    })
}

/// Extreme eigenvalues of the Lanczos tridiagonal accumulated by PCG:
/// `T[k][k] = 1/alpha_k + beta_k / alpha_{k-1}` (no second term for k = 0),
/// `T[k][k+1] = sqrt(beta_{k+1}) / alpha_k`.
fn ritz_extremes(alphas: &[f64], betas: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
    let m = alphas.len();
    if m == 0 {
        return Ok((None, None));
    }
    let mut t = DMatrix::zeros(m, m);
    for k in 0..m {
        let mut diag = 1.0 / alphas[k];
        if k > 0 {
            diag += betas[k - 1] / alphas[k - 1];
        }
        t[(k, k)] = diag;
        if k + 1 < m {
            let off = betas[k].sqrt() / alphas[k];
            t[(k, k + 1)] = off;
            t[(k + 1, k)] = off;
        }
    }
    let eig = kernels::sym_eig(&SymMatrix::symmetrized(t))?;
    Ok((Some(eig.values[0]), Some(eig.values[m - 1])))
}

/// Dense spectrum of the preconditioned operator `M^{-1} A`, computed
/// symmetrically as `eig(L^T M^{-1} L)` with `A = L L^T`. Ascending order.
/// Intended for validation at small interface sizes.
pub fn preconditioned_spectrum_dense(pre: &BddcPreconditioner) -> Result<DVector<f64>> {
    let n = pre.interface_size();
    let mut a = DMatrix::zeros(n, n);
    let mut minv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        a.set_column(j, &pre.apply_operator(&e));
        minv.set_column(j, &pre.apply(&e));
    }
    let a = SymMatrix::symmetrized(a);
    let minv = SymMatrix::symmetrized(minv);
    let l = SpdFactor::new(&a, "assembled interface operator")?.lower();
    let k = SymMatrix::symmetrized(l.tr_mul(minv.as_matrix()) * &l);
    Ok(kernels::sym_eig(&k)?.values)
}

/// Solve the interface problem with BDDC-preconditioned CG and return the
/// interface solution in the original variables plus the convergence report.
pub fn solve_interface(
    subs: &[SubdomainSystem],
    dofs: &DofSpaces,
    pre: &BddcPreconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, PcgReport)> {
    let g = crate::schur::assemble_interface_rhs(subs, dofs);
    let g_t = pre.transform_rhs(&g);
    let (w_t, report) = pcg_solve(
        |x| pre.apply_operator(x),
        |r| pre.apply(r),
        &g_t,
        tol,
        max_iter,
    )?;
    Ok((pre.untransform_solution(&w_t), report))
}
