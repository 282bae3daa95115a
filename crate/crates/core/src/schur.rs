//! Subdomain systems and Schur complements.
//!
//! Each subdomain assembles its local stiffness matrix over
//! `[interior nodes, interface nodes]` (Dirichlet nodes dropped, homogeneous
//! boundary conditions), factors the interior block, and exposes
//!
//! * the local Schur complement `S_i = A_BB - A_BI A_II^{-1} A_IB` on its
//!   interface nodes in canonical local order,
//! * the condensed right-hand side `g_i = f_B - A_BI A_II^{-1} f_I`,
//! * interior back-substitution for solution reconstruction.
//!
//! The assembled interface operator is `S = sum_i R_i^T S_i R_i`; by Schur
//! additivity it equals the Schur complement of the global free matrix onto
//! the interface, which the tests exploit as an independent oracle.
//!
//! Interior ("floating") subdomains never touch the Dirichlet boundary, so
//! their `S_i` is singular with the constants in its kernel; nothing here
//! factors `S_i` itself, only its interior block.

use nalgebra::{DMatrix, DVector};

use crate::decomp::{DofSpaces, Partition};
use crate::error::{Error, Result};
use crate::grid::{element_stiffness, CoefficientField, StructuredGrid};
use crate::kernels::{SpdFactor, SymMatrix};

/// One subdomain's condensed system.
pub struct SubdomainSystem {
    pub subdomain: usize,
    /// Global ids of the eliminated interior nodes, ascending.
    pub interior_nodes: Vec<usize>,
    /// Global ids of the local interface nodes in canonical order.
    pub boundary_nodes: Vec<usize>,
    a_ii: Option<SpdFactor>,
    a_ib: DMatrix<f64>,
    schur: SymMatrix,
    load_interior: DVector<f64>,
    interface_rhs: DVector<f64>,
}

impl SubdomainSystem {
    /// Local Schur complement on the interface nodes.
    pub fn schur(&self) -> &SymMatrix {
        &self.schur
    }

    /// Condensed load on the interface nodes.
    pub fn interface_rhs(&self) -> &DVector<f64> {
        &self.interface_rhs
    }

    /// `S_i x` (dense product).
    pub fn apply_schur(&self, x: &DVector<f64>) -> DVector<f64> {
        self.schur.as_matrix() * x
    }

    /// Recover interior values for given interface values:
    /// `u_I = A_II^{-1} (f_I - A_IB w_B)`.
    pub fn solve_interior(&self, w_b: &DVector<f64>) -> DVector<f64> {
        match &self.a_ii {
            Some(factor) => {
                let rhs = &self.load_interior - &self.a_ib * w_b;
                factor.solve_vec(&rhs)
            }
            None => DVector::zeros(0),
        }
    }
}

/// Assemble and condense subdomain `s`. The interface node order is taken
/// from `dofs` (edge blocks then vertices); the source term uses the same
/// centroid quadrature as the global assembly.
pub fn build_subdomain(
    grid: &StructuredGrid,
    field: &CoefficientField,
    source: &dyn Fn(f64, f64) -> f64,
    partition: &Partition,
    dofs: &DofSpaces,
    s: usize,
) -> Result<SubdomainSystem> {
    let interior_nodes = partition.interior_nodes(s);
    let boundary_nodes = dofs.subdomains[s].boundary_nodes.clone();
    let ni = interior_nodes.len();
    let nb = boundary_nodes.len();
    let nt = ni + nb;

    let mut local_index = std::collections::HashMap::with_capacity(nt);
    for (k, &node) in interior_nodes.iter().enumerate() {
        local_index.insert(node, k);
    }
    for (k, &node) in boundary_nodes.iter().enumerate() {
        local_index.insert(node, ni + k);
    }

    let mut a = DMatrix::zeros(nt, nt);
    let mut f = DVector::zeros(nt);
    for e in partition.elements_of(s) {
        let nodes = grid.element_nodes(e);
        let k = element_stiffness(&grid.element_vertices(e), field.value(e), e)?;
        let (cx, cy) = grid.element_centroid(e);
        let f_contrib = source(cx, cy) * grid.element_area(e) / 3.0;
        for (la, &ga) in nodes.iter().enumerate() {
            let Some(&ia) = local_index.get(&ga) else { continue };
            f[ia] += f_contrib;
            for (lb, &gb) in nodes.iter().enumerate() {
                if let Some(&ib) = local_index.get(&gb) {
                    a[(ia, ib)] += k[la][lb];
                }
            }
        }
    }

    let a_bb = SymMatrix::symmetrized(a.view((ni, ni), (nb, nb)).into_owned());
    let load_interior = f.rows(0, ni).into_owned();
    let load_boundary = f.rows(ni, nb).into_owned();

    if ni == 0 {
        return Ok(SubdomainSystem {
            subdomain: s,
            interior_nodes,
            boundary_nodes,
            a_ii: None,
            a_ib: DMatrix::zeros(0, nb),
            schur: a_bb,
            load_interior,
            interface_rhs: load_boundary,
        });
    }

    let a_ii = SymMatrix::symmetrized(a.view((0, 0), (ni, ni)).into_owned());
    let a_ib = a.view((0, ni), (ni, nb)).into_owned();
    let factor = SpdFactor::new(&a_ii, &format!("interior block of subdomain {s}"))?;

    let x = factor.solve_mat(&a_ib); // A_II^{-1} A_IB
    let schur = SymMatrix::symmetrized(a_bb.as_matrix() - a_ib.tr_mul(&x));
    let interface_rhs = &load_boundary - a_ib.tr_mul(&factor.solve_vec(&load_interior));

    Ok(SubdomainSystem {
        subdomain: s,
        interior_nodes,
        boundary_nodes,
        a_ii: Some(factor),
        a_ib,
        schur,
        load_interior,
        interface_rhs,
    })
}

/// Build every subdomain system for one coefficient realization.
pub fn build_all_subdomains(
    grid: &StructuredGrid,
    field: &CoefficientField,
    source: &dyn Fn(f64, f64) -> f64,
    partition: &Partition,
    dofs: &DofSpaces,
) -> Result<Vec<SubdomainSystem>> {
    (0..partition.subdomain_count())
        .map(|s| build_subdomain(grid, field, source, partition, dofs, s))
        .collect()
}

/// Assembled interface load `g = sum_i R_i^T g_i`.
pub fn assemble_interface_rhs(subs: &[SubdomainSystem], dofs: &DofSpaces) -> DVector<f64> {
    let mut g = DVector::zeros(dofs.n_interface());
    for (s, sub) in subs.iter().enumerate() {
        let positions = &dofs.subdomains[s].interface_positions;
        for (local, &pos) in positions.iter().enumerate() {
            g[pos] += sub.interface_rhs[local];
        }
    }
    g
}

/// Dense assembled interface operator `sum_i R_i^T S_i R_i` (validation and
/// small-problem use; the solver applies it subdomain by subdomain).
pub fn assemble_global_schur_dense(subs: &[SubdomainSystem], dofs: &DofSpaces) -> SymMatrix {
    let n = dofs.n_interface();
    let mut a = DMatrix::zeros(n, n);
    for (s, sub) in subs.iter().enumerate() {
        let positions = &dofs.subdomains[s].interface_positions;
        let local = sub.schur.as_matrix();
        for (li, &pi) in positions.iter().enumerate() {
            for (lj, &pj) in positions.iter().enumerate() {
                a[(pi, pj)] += local[(li, lj)];
            }
        }
    }
    SymMatrix::symmetrized(a)
}

/// Apply the assembled interface operator without forming it.
pub fn apply_global_schur(
    subs: &[SubdomainSystem],
    dofs: &DofSpaces,
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut y = DVector::zeros(dofs.n_interface());
    for (s, sub) in subs.iter().enumerate() {
        let positions = &dofs.subdomains[s].interface_positions;
        let mut x_local = DVector::zeros(positions.len());
        for (local, &pos) in positions.iter().enumerate() {
            x_local[local] = x[pos];
        }
        let y_local = sub.apply_schur(&x_local);
        for (local, &pos) in positions.iter().enumerate() {
            y[pos] += y_local[local];
        }
    }
    y
}

/// Expand an interface solution to the full nodal vector: zeros on the
/// Dirichlet boundary, interface values from `w`, interiors recovered by
/// back-substitution.
pub fn reconstruct_solution(
    grid: &StructuredGrid,
    subs: &[SubdomainSystem],
    dofs: &DofSpaces,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    if w.len() != dofs.n_interface() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "interface solution has {} entries, interface has {}",
                w.len(),
                dofs.n_interface()
            ),
        });
    }
    let mut full = DVector::zeros(grid.node_count());
    for (&node, &value) in dofs.interface_nodes.iter().zip(w.iter()) {
        full[node] = value;
    }
    for (s, sub) in subs.iter().enumerate() {
        let positions = &dofs.subdomains[s].interface_positions;
        let mut w_b = DVector::zeros(positions.len());
        for (local, &pos) in positions.iter().enumerate() {
            w_b[local] = w[pos];
        }
        let u_i = sub.solve_interior(&w_b);
        for (k, &node) in sub.interior_nodes.iter().enumerate() {
            full[node] = u_i[k];
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{build_restrictions_with_counts, classify_interface, partition_uniform};
    use crate::grid::{assemble, direct_solve};
    use crate::kernels;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        n: usize,
        per_side: usize,
        seed: u64,
    ) -> (
        StructuredGrid,
        CoefficientField,
        Partition,
        crate::decomp::InterfaceClasses,
        DofSpaces,
    ) {
        let grid = StructuredGrid::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.element_count())
            .map(|_| 10f64.powf(rng.random_range(-2.0..2.0)))
            .collect();
        let field = CoefficientField::from_values(&grid, values).unwrap();
        let partition = partition_uniform(&grid, per_side).unwrap();
        let classes = classify_interface(&partition);
        let counts = vec![0usize; classes.edges.len()];
        let dofs = build_restrictions_with_counts(&partition, &classes, &counts).unwrap();
        (grid, field, partition, classes, dofs)
    }

    /// Schur additivity: the subdomain-assembled interface operator equals
    /// the Schur complement of the global free matrix onto the interface.
    #[test]
    fn assembled_schur_matches_global_elimination() {
        let (grid, field, partition, _, dofs) = setup(8, 2, 1);
        let source = |x: f64, y: f64| 1.0 + x * y;
        let subs = build_all_subdomains(&grid, &field, &source, &partition, &dofs).unwrap();
        let assembled = assemble_global_schur_dense(&subs, &dofs);

        let system = assemble(&grid, &field, &source, None).unwrap();
        let a_free = SymMatrix::symmetrized(system.free_matrix_dense());
        let keep: Vec<usize> = dofs
            .interface_nodes
            .iter()
            .map(|&node| system.free_index(node).unwrap())
            .collect();
        let global = kernels::schur_onto(&a_free, &keep, "test").unwrap();
        let scale = global.max_abs();
        assert!(
            (assembled.as_matrix() - global.as_matrix()).amax() < 1e-10 * scale,
            "Schur additivity violated"
        );

        // Same for the condensed right-hand side: eliminate interiors from
        // the global system explicitly.
        let g_assembled = assemble_interface_rhs(&subs, &dofs);
        let elim: Vec<usize> = (0..a_free.dim()).filter(|i| !keep.contains(i)).collect();
        let a_ee = a_free.principal_submatrix(&elim);
        let a_ek = DMatrix::from_fn(elim.len(), keep.len(), |i, j| {
            a_free.as_matrix()[(elim[i], keep[j])]
        });
        let f_e = DVector::from_fn(elim.len(), |i, _| system.load()[elim[i]]);
        let f_k = DVector::from_fn(keep.len(), |i, _| system.load()[keep[i]]);
        let factor = SpdFactor::new(&a_ee, "test").unwrap();
        let g_global = &f_k - a_ek.tr_mul(&factor.solve_vec(&f_e));
        assert!((g_assembled - g_global).amax() < 1e-12 * (1.0 + f_k.amax()));
    }

    /// Solving the interface problem densely and back-substituting must
    /// reproduce the global direct solution (static condensation is exact).
    #[test]
    fn condensation_roundtrip_matches_direct_solve() {
        let (grid, field, partition, _, dofs) = setup(8, 4, 2);
        let source = |_: f64, _: f64| 1.0;
        let subs = build_all_subdomains(&grid, &field, &source, &partition, &dofs).unwrap();
        let s_hat = assemble_global_schur_dense(&subs, &dofs);
        let g_hat = assemble_interface_rhs(&subs, &dofs);
        let w = kernels::solve_spd(&s_hat, &g_hat, "assembled interface operator").unwrap();
        let u = reconstruct_solution(&grid, &subs, &dofs, &w).unwrap();

        let system = assemble(&grid, &field, &source, None).unwrap();
        let u_direct = direct_solve(&system).unwrap();
        let err = (&u - &u_direct).amax() / u_direct.amax();
        assert!(err < 1e-10, "condensation mismatch: {err}");
    }

    #[test]
    fn floating_subdomain_kernel_is_constant() {
        let (_, _, partition, _, dofs) = setup(8, 4, 3);
        let grid = StructuredGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = (0..grid.element_count())
            .map(|_| rng.random_range(0.5..2.0))
            .collect();
        let field = CoefficientField::from_values(&grid, values).unwrap();
        let subs =
            build_all_subdomains(&grid, &field, &|_, _| 0.0, &partition, &dofs).unwrap();
        for s in 0..partition.subdomain_count() {
            let sub = &subs[s];
            let ones = DVector::from_element(sub.boundary_nodes.len(), 1.0);
            let image = sub.apply_schur(&ones);
            let scale = sub.schur().max_abs();
            if partition.touches_dirichlet_boundary(s) {
                // Dirichlet subdomains are definite: constants are not in the
                // kernel, and the Schur complement factors.
                assert!(image.amax() > 1e-8 * scale);
                assert!(SpdFactor::new(sub.schur(), "test").is_ok());
            } else {
                assert!(
                    image.amax() < 1e-10 * scale,
                    "floating subdomain {s} kernel violated: {}",
                    image.amax()
                );
            }
        }
    }

    #[test]
    fn apply_matches_dense_operator() {
        let (grid, field, partition, _, dofs) = setup(8, 2, 5);
        let subs =
            build_all_subdomains(&grid, &field, &|_, _| 1.0, &partition, &dofs).unwrap();
        let dense = assemble_global_schur_dense(&subs, &dofs);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = DVector::from_fn(dofs.n_interface(), |_, _| rng.random_range(-1.0..1.0));
            let y_apply = apply_global_schur(&subs, &dofs, &x);
            let y_dense = dense.as_matrix() * &x;
            assert!((y_apply - y_dense).amax() < 1e-11 * dense.max_abs());
        }
    }

    #[test]
    fn subdomain_boundary_order_follows_dof_layout() {
        let (grid, field, partition, classes, dofs) = setup(8, 2, 7);
        let subs =
            build_all_subdomains(&grid, &field, &|_, _| 1.0, &partition, &dofs).unwrap();
        for (s, sub) in subs.iter().enumerate() {
            assert_eq!(sub.boundary_nodes, dofs.subdomains[s].boundary_nodes);
            assert_eq!(sub.subdomain, s);
        }
        // Edge blocks of neighbouring subdomains refer to the same global
        // nodes in the same order.
        for edge in &classes.edges {
            let (i, j) = edge.subdomains;
            let ri = dofs.subdomains[i].edges.iter().find(|r| r.edge == edge.id).unwrap();
            let rj = dofs.subdomains[j].edges.iter().find(|r| r.edge == edge.id).unwrap();
            let nodes_i = &subs[i].boundary_nodes[ri.offset..ri.offset + ri.len];
            let nodes_j = &subs[j].boundary_nodes[rj.offset..rj.offset + rj.len];
            assert_eq!(nodes_i, nodes_j);
            assert_eq!(nodes_i, edge.nodes.as_slice());
        }
        let _ = grid;
    }
}
