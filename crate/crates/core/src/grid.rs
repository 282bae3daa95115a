//! P1 finite elements on a structured criss-cross triangulation of the unit
//! square.
//!
//! The square is divided into `n x n` cells; each cell is split into two
//! triangles along its lower-left to upper-right diagonal. Nodes are numbered
//! lexicographically, `index = j * (n + 1) + i` for grid position `(i, j)`,
//! so the assembled stiffness matrix is banded with half-bandwidth `n` on the
//! free (interior) nodes and a dedicated banded Cholesky solves it directly.
//!
//! The diffusion coefficient is elementwise constant ([`CoefficientField`]),
//! which is how the random-field sampler hands coefficients to the solver:
//! one value per triangle, evaluated at its centroid.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Structured triangulation of the unit square with `n` cells per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuredGrid {
    n: usize,
}

impl StructuredGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidResolution { n });
        }
        Ok(Self { n })
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Mesh width `1/n`.
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node_count(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    pub fn element_count(&self) -> usize {
        2 * self.n * self.n
    }

    /// Lexicographic node index of grid position `(i, j)`.
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.n && j <= self.n);
        j * (self.n + 1) + i
    }

    /// Grid position of a node index.
    pub fn node_position(&self, index: usize) -> (usize, usize) {
        (index % (self.n + 1), index / (self.n + 1))
    }

    pub fn node_coords(&self, index: usize) -> (f64, f64) {
        let (i, j) = self.node_position(index);
        (i as f64 * self.h(), j as f64 * self.h())
    }

    pub fn is_boundary_node(&self, index: usize) -> bool {
        let (i, j) = self.node_position(index);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Cell `(cx, cy)` owning element `e`; elements `2*(cy*n + cx)` and
    /// `2*(cy*n + cx) + 1` are the lower and upper triangle of that cell.
    pub fn cell_of_element(&self, e: usize) -> (usize, usize) {
        let cell = e / 2;
        (cell % self.n, cell / self.n)
    }

    /// The three node indices of element `e`, in the fixed local order used
    /// by [`element_stiffness`].
    ///
    /// Lower triangle: `(v00, v10, v11)`; upper triangle: `(v00, v11, v01)`,
    /// where `vXY` is the cell corner at offset `(X, Y)`. Both run
    /// counterclockwise.
    pub fn element_nodes(&self, e: usize) -> [usize; 3] {
        let (cx, cy) = self.cell_of_element(e);
        let v00 = self.node_index(cx, cy);
        let v10 = self.node_index(cx + 1, cy);
        let v01 = self.node_index(cx, cy + 1);
        let v11 = self.node_index(cx + 1, cy + 1);
        if e % 2 == 0 {
            [v00, v10, v11]
        } else {
            [v00, v11, v01]
        }
    }

    pub fn element_vertices(&self, e: usize) -> [(f64, f64); 3] {
        self.element_nodes(e).map(|v| self.node_coords(v))
    }

    pub fn element_centroid(&self, e: usize) -> (f64, f64) {
        let [a, b, c] = self.element_vertices(e);
        ((a.0 + b.0 + c.0) / 3.0, (a.1 + b.1 + c.1) / 3.0)
    }

    pub fn element_area(&self, _e: usize) -> f64 {
        0.5 * self.h() * self.h()
    }
}

/// Elementwise-constant diffusion coefficient, one value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    values: Vec<f64>,
}

impl CoefficientField {
    /// Constant coefficient on every element.
    pub fn constant(grid: &StructuredGrid, value: f64) -> Result<Self> {
        Self::from_values(grid, vec![value; grid.element_count()])
    }

    /// Per-element values; each must be finite and strictly positive.
    pub fn from_values(grid: &StructuredGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.element_count() {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "coefficient field has {} values for {} elements",
                    values.len(),
                    grid.element_count()
                ),
            });
        }
        for (e, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidCoefficient {
                    element: e,
                    value: v,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn value(&self, element: usize) -> f64 {
        self.values[element]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// P1 element stiffness matrix for element `e` with coefficient `rho`:
/// `K_ab = rho * (grad phi_a . grad phi_b) * area`.
///
/// Gradients are computed from the triangle geometry, so the routine works
/// for any non-degenerate vertex placement (degenerate area is an error).
pub fn element_stiffness(vertices: &[(f64, f64); 3], rho: f64, element: usize) -> Result<[[f64; 3]; 3]> {
    let [(x0, y0), (x1, y1), (x2, y2)] = *vertices;
    let two_area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if two_area.abs() < 1e-300 {
        return Err(Error::DegenerateElement {
            element,
            area: 0.5 * two_area,
        });
    }
    // grad phi_a = (b_a, c_a) / (2 A); K = rho (b b^T + c c^T) / (4 A).
    let b = [y1 - y2, y2 - y0, y0 - y1];
    let c = [x2 - x1, x0 - x2, x1 - x0];
    let scale = rho / (2.0 * two_area);
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for bb in 0..3 {
            k[a][bb] = scale * (b[a] * b[bb] + c[a] * c[bb]);
        }
    }
    Ok(k)
}

/// Symmetric positive definite banded matrix in lower-band storage:
/// `band[i][d] = A[i, i - d]` for `d = 0..=bw`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    dim: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(dim: usize, bw: usize) -> Self {
        Self {
            dim,
            bw,
            band: vec![0.0; dim * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn slot(&self, i: usize, d: usize) -> usize {
        i * (self.bw + 1) + d
    }

    /// Add `v` to entry `(i, j)`; `|i - j|` must be within the band. Only the
    /// lower triangle is stored, so symmetric pairs are added once.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let d = r - c;
        debug_assert!(d <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let s = self.slot(r, d);
        self.band[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let d = r - c;
        if d > self.bw {
            0.0
        } else {
            self.band[self.slot(r, d)]
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// Matrix-vector product.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim);
        let mut y = DVector::zeros(self.dim);
        for i in 0..self.dim {
            let lo = i.saturating_sub(self.bw);
            let mut acc = 0.0;
            for j in lo..=i {
                acc += self.get(i, j) * x[j];
            }
            for j in (i + 1)..(i + self.bw + 1).min(self.dim) {
                acc += self.get(i, j) * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// Banded Cholesky factorization `A = L L^T`, consuming the matrix.
    pub fn cholesky(mut self, context: &str) -> Result<BandedCholesky> {
        let (dim, bw) = (self.dim, self.bw);
        for i in 0..dim {
            let lo = i.saturating_sub(bw);
            // Off-diagonal entries of row i, in increasing column order.
            for j in lo..i {
                let sij = self.slot(i, i - j);
                let mut s = self.band[sij];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= self.band[self.slot(i, i - k)] * self.band[self.slot(j, j - k)];
                }
                self.band[sij] = s / self.band[self.slot(j, 0)];
            }
            let sii = self.slot(i, 0);
            let mut s = self.band[sii];
            for k in lo..i {
                let l = self.band[self.slot(i, i - k)];
                s -= l * l;
            }
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: format!("{context} (banded Cholesky, pivot {i})"),
                });
            }
            self.band[sii] = s.sqrt();
        }
        Ok(BandedCholesky { factor: self })
    }
}

/// Factored form of a [`BandedSpd`]; `factor` stores `L` in the same layout.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.factor.dim
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let f = &self.factor;
        let (dim, bw) = (f.dim, f.bw);
        assert_eq!(rhs.len(), dim);
        let mut x = rhs.clone();
        // Forward: L y = b.
        for i in 0..dim {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for k in lo..i {
                s -= f.band[f.slot(i, i - k)] * x[k];
            }
            x[i] = s / f.band[f.slot(i, 0)];
        }
        // Backward: L^T x = y.
        for i in (0..dim).rev() {
            let hi = (i + bw + 1).min(dim);
            let mut s = x[i];
            for j in (i + 1)..hi {
                s -= f.band[f.slot(j, j - i)] * x[j];
            }
            x[i] = s / f.band[f.slot(i, 0)];
        }
        x
    }
}

/// Assembled global system after Dirichlet elimination.
///
/// The matrix lives on the free (interior) nodes in lexicographic order;
/// boundary node values are stored separately and re-inserted by
/// [`direct_solve`].
pub struct AssembledSystem {
    grid: StructuredGrid,
    /// Global node ids of free nodes, ascending.
    free_nodes: Vec<usize>,
    /// Global node id -> position in `free_nodes` (None for boundary nodes).
    free_index: Vec<Option<usize>>,
    stiffness: BandedSpd,
    load: DVector<f64>,
    /// Dirichlet values for every node (zero at free nodes).
    boundary_values: Vec<f64>,
}

impl AssembledSystem {
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        self.free_index[node]
    }

    pub fn stiffness(&self) -> &BandedSpd {
        &self.stiffness
    }

    pub fn load(&self) -> &DVector<f64> {
        &self.load
    }

    pub fn boundary_values(&self) -> &[f64] {
        &self.boundary_values
    }

    /// Dense copy of the free-node stiffness matrix (test and validation use).
    pub fn free_matrix_dense(&self) -> DMatrix<f64> {
        self.stiffness.to_dense()
    }
}

/// Assemble stiffness and load on all nodes with no boundary condition,
/// returning the dense Neumann matrix. Every row sums to zero since constants
/// are in the kernel of the bilinear form. Primarily a validation surface;
/// the solver path uses [`assemble`].
pub fn assemble_neumann(grid: &StructuredGrid, field: &CoefficientField) -> Result<DMatrix<f64>> {
    let nn = grid.node_count();
    let mut a = DMatrix::zeros(nn, nn);
    for e in 0..grid.element_count() {
        let nodes = grid.element_nodes(e);
        let k = element_stiffness(&grid.element_vertices(e), field.value(e), e)?;
        for (la, &ga) in nodes.iter().enumerate() {
            for (lb, &gb) in nodes.iter().enumerate() {
                a[(ga, gb)] += k[la][lb];
            }
        }
    }
    Ok(a)
}

/// Assemble the Dirichlet problem `-div(rho grad u) = f` on the unit square.
///
/// `dirichlet` supplies boundary values (`None` means homogeneous). Load
/// integrals use one-point centroid quadrature: each element adds
/// `f(centroid) * area / 3` to each of its vertices. Inhomogeneous boundary
/// values are lifted into the load in the usual way.
pub fn assemble(
    grid: &StructuredGrid,
    field: &CoefficientField,
    source: &dyn Fn(f64, f64) -> f64,
    dirichlet: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<AssembledSystem> {
    let nn = grid.node_count();
    let mut free_index = vec![None; nn];
    let mut free_nodes = Vec::new();
    let mut boundary_values = vec![0.0; nn];
    for node in 0..nn {
        if grid.is_boundary_node(node) {
            if let Some(g) = dirichlet {
                let (x, y) = grid.node_coords(node);
                boundary_values[node] = g(x, y);
            }
        } else {
            free_index[node] = Some(free_nodes.len());
            free_nodes.push(node);
        }
    }

    // Neighboring free nodes differ by at most n in free numbering (the
    // farthest stencil neighbor is the (+1, +1) diagonal).
    let mut stiffness = BandedSpd::zeros(free_nodes.len(), grid.n());
    let mut load = DVector::zeros(free_nodes.len());

    for e in 0..grid.element_count() {
        let nodes = grid.element_nodes(e);
        let k = element_stiffness(&grid.element_vertices(e), field.value(e), e)?;
        let (cx, cy) = grid.element_centroid(e);
        let f_contrib = source(cx, cy) * grid.element_area(e) / 3.0;
        for (la, &ga) in nodes.iter().enumerate() {
            let Some(fa) = free_index[ga] else { continue };
            load[fa] += f_contrib;
            for (lb, &gb) in nodes.iter().enumerate() {
                match free_index[gb] {
                    Some(fb) => {
                        if fa <= fb {
                            stiffness.add(fa, fb, k[la][lb]);
                        }
                    }
                    None => {
                        load[fa] -= k[la][lb] * boundary_values[gb];
                    }
                }
            }
        }
    }

    Ok(AssembledSystem {
        grid: *grid,
        free_nodes,
        free_index,
        stiffness,
        load,
        boundary_values,
    })
}

/// Solve the assembled system directly (banded Cholesky) and return the full
/// nodal vector, boundary values included.
pub fn direct_solve(system: &AssembledSystem) -> Result<DVector<f64>> {
    let chol = system.stiffness.clone().cholesky("global stiffness matrix")?;
    let free = chol.solve(&system.load);
    let mut full = DVector::from_row_slice(&system.boundary_values);
    for (fi, &node) in system.free_nodes.iter().enumerate() {
        full[node] = free[fi];
    }
    Ok(full)
}
