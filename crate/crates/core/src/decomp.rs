//! Non-overlapping domain decomposition bookkeeping.
//!
//! The unit square is split into `per_side x per_side` congruent square
//! subdomains aligned with the fine grid. Interface nodes (shared by at least
//! two subdomain closures, excluding the Dirichlet boundary) are classified
//! into open **edges** (shared by exactly two subdomains) and **cross
//! vertices** (corner points shared by up to four).
//!
//! All orderings are canonical and deterministic:
//!
//! * edges are sorted lexicographically by their subdomain pair, nodes along
//!   an edge ascending by node id;
//! * the global interface space groups edge blocks in edge-id order followed
//!   by the cross vertices ascending by node id;
//! * each subdomain's local interface space lists its edges in edge-id order
//!   followed by its vertices, matching the global convention;
//! * primal unknowns number the cross vertices first, then the per-edge
//!   adaptive constraint slots in edge-id order.

use crate::adaptive::AdaptiveConstraintSet;
use crate::error::{Error, Result};
use crate::grid::StructuredGrid;

/// Uniform square partition of the grid into `per_side^2` subdomains.
#[derive(Debug, Clone, Copy)]
pub struct Partition {
    grid: StructuredGrid,
    per_side: usize,
    /// Fine cells per subdomain side.
    sub_cells: usize,
}

/// Build the uniform partition; `per_side` must divide `n`, and for more
/// than one subdomain each subdomain must be at least two cells wide so that
/// every edge carries at least one interface node.
pub fn partition_uniform(grid: &StructuredGrid, per_side: usize) -> Result<Partition> {
    if per_side == 0 || grid.n() % per_side != 0 {
        return Err(Error::PartitionMismatch {
            n: grid.n(),
            per_side,
        });
    }
    let sub_cells = grid.n() / per_side;
    if per_side > 1 && sub_cells < 2 {
        return Err(Error::PartitionMismatch {
            n: grid.n(),
            per_side,
        });
    }
    Ok(Partition {
        grid: *grid,
        per_side,
        sub_cells,
    })
}

impl Partition {
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn per_side(&self) -> usize {
        self.per_side
    }

    /// Fine cells per subdomain side.
    pub fn sub_cells(&self) -> usize {
        self.sub_cells
    }

    pub fn subdomain_count(&self) -> usize {
        self.per_side * self.per_side
    }

    /// Grid cell at the lower-left corner of subdomain `s`.
    pub fn subdomain_origin(&self, s: usize) -> (usize, usize) {
        let sx = s % self.per_side;
        let sy = s / self.per_side;
        (sx * self.sub_cells, sy * self.sub_cells)
    }

    /// Element ids owned by subdomain `s`, ascending.
    pub fn elements_of(&self, s: usize) -> Vec<usize> {
        let (ox, oy) = self.subdomain_origin(s);
        let n = self.grid.n();
        let mut elements = Vec::with_capacity(2 * self.sub_cells * self.sub_cells);
        for cy in oy..oy + self.sub_cells {
            for cx in ox..ox + self.sub_cells {
                let cell = cy * n + cx;
                elements.push(2 * cell);
                elements.push(2 * cell + 1);
            }
        }
        elements
    }

    /// Nodes strictly inside the open subdomain `s`, ascending. These are the
    /// unknowns eliminated by the local Schur complement.
    pub fn interior_nodes(&self, s: usize) -> Vec<usize> {
        let (ox, oy) = self.subdomain_origin(s);
        let mut nodes = Vec::new();
        for j in oy + 1..oy + self.sub_cells {
            for i in ox + 1..ox + self.sub_cells {
                nodes.push(self.grid.node_index(i, j));
            }
        }
        nodes
    }

    /// All non-Dirichlet nodes of the closed subdomain `s`, ascending.
    pub fn free_closure_nodes(&self, s: usize) -> Vec<usize> {
        let (ox, oy) = self.subdomain_origin(s);
        let mut nodes = Vec::new();
        for j in oy..=oy + self.sub_cells {
            for i in ox..=ox + self.sub_cells {
                let node = self.grid.node_index(i, j);
                if !self.grid.is_boundary_node(node) {
                    nodes.push(node);
                }
            }
        }
        nodes
    }

    /// Whether subdomain `s` touches the Dirichlet boundary. Subdomains that
    /// do not (interior, "floating" subdomains) have singular local Schur
    /// complements with the constants in their kernel.
    pub fn touches_dirichlet_boundary(&self, s: usize) -> bool {
        let sx = s % self.per_side;
        let sy = s / self.per_side;
        sx == 0 || sy == 0 || sx == self.per_side - 1 || sy == self.per_side - 1
    }

    /// Number of closed subdomains containing `node`.
    pub fn node_multiplicity(&self, node: usize) -> usize {
        let (i, j) = self.grid.node_position(node);
        self.axis_multiplicity(i) * self.axis_multiplicity(j)
    }

    fn axis_multiplicity(&self, coord: usize) -> usize {
        let mut count = 1;
        if coord % self.sub_cells == 0 && coord > 0 && coord < self.grid.n() {
            count += 1;
        }
        count
    }
}

/// An open edge: the interface segment strictly between two subdomains.
#[derive(Debug, Clone)]
pub struct Edge {
    pub id: usize,
    /// Sharing subdomains, lower id first.
    pub subdomains: (usize, usize),
    /// Global node ids along the edge, ascending.
    pub nodes: Vec<usize>,
}

/// A cross vertex shared by up to four subdomain closures.
#[derive(Debug, Clone)]
pub struct InterfaceVertex {
    pub id: usize,
    pub node: usize,
    /// Sharing subdomains, ascending.
    pub sharers: Vec<usize>,
}

/// Complete classification of the interface into edges and cross vertices.
#[derive(Debug, Clone)]
pub struct InterfaceClasses {
    pub edges: Vec<Edge>,
    pub vertices: Vec<InterfaceVertex>,
}

impl InterfaceClasses {
    pub fn interface_node_count(&self) -> usize {
        self.edges.iter().map(|e| e.nodes.len()).sum::<usize>() + self.vertices.len()
    }

    /// Edge ids incident to subdomain `s`, ascending.
    pub fn edges_of_subdomain(&self, s: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.subdomains.0 == s || e.subdomains.1 == s)
            .map(|e| e.id)
            .collect()
    }

    /// Vertex ids incident to subdomain `s`, ascending.
    pub fn vertices_of_subdomain(&self, s: usize) -> Vec<usize> {
        self.vertices
            .iter()
            .filter(|v| v.sharers.contains(&s))
            .map(|v| v.id)
            .collect()
    }
}

/// Classify every interface node into exactly one edge or vertex class.
pub fn classify_interface(partition: &Partition) -> InterfaceClasses {
    let grid = partition.grid();
    let per_side = partition.per_side();
    let sc = partition.sub_cells();
    let sub = |sx: usize, sy: usize| sy * per_side + sx;

    let mut edges: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    // Vertical interface lines x = m * H between subdomain columns m-1 and m.
    for m in 1..per_side {
        let i = m * sc;
        for row in 0..per_side {
            let nodes: Vec<usize> = (row * sc + 1..(row + 1) * sc)
                .map(|j| grid.node_index(i, j))
                .collect();
            edges.push((sub(m - 1, row), sub(m, row), nodes));
        }
    }
    // Horizontal interface lines y = m * H between subdomain rows m-1 and m.
    for m in 1..per_side {
        let j = m * sc;
        for col in 0..per_side {
            let nodes: Vec<usize> = (col * sc + 1..(col + 1) * sc)
                .map(|i| grid.node_index(i, j))
                .collect();
            edges.push((sub(col, m - 1), sub(col, m), nodes));
        }
    }
    edges.sort_by_key(|&(a, b, _)| (a, b));
    let edges = edges
        .into_iter()
        .enumerate()
        .map(|(id, (a, b, nodes))| Edge {
            id,
            subdomains: (a, b),
            nodes,
        })
        .collect();

    let mut vertices = Vec::new();
    for l in 1..per_side {
        for m in 1..per_side {
            let node = grid.node_index(m * sc, l * sc);
            let sharers = vec![
                sub(m - 1, l - 1),
                sub(m, l - 1),
                sub(m - 1, l),
                sub(m, l),
            ];
            vertices.push(InterfaceVertex {
                id: vertices.len(),
                node,
                sharers,
            });
        }
    }

    InterfaceClasses { edges, vertices }
}

/// Reference from a subdomain's local interface space to one of its edges.
#[derive(Debug, Clone, Copy)]
pub struct SubdomainEdgeRef {
    pub edge: usize,
    /// Offset of the edge block within the local interface vector.
    pub offset: usize,
    pub len: usize,
}

/// Reference from a subdomain's local interface space to one of its vertices.
#[derive(Debug, Clone, Copy)]
pub struct SubdomainVertexRef {
    pub vertex: usize,
    pub offset: usize,
}

/// Local interface bookkeeping for one subdomain.
#[derive(Debug, Clone)]
pub struct SubdomainDofs {
    pub subdomain: usize,
    /// Global node ids in the canonical local order: edge blocks in edge-id
    /// order, then vertices ascending by node id.
    pub boundary_nodes: Vec<usize>,
    /// Local index -> position in the global interface vector.
    pub interface_positions: Vec<usize>,
    pub edges: Vec<SubdomainEdgeRef>,
    pub vertices: Vec<SubdomainVertexRef>,
}

impl SubdomainDofs {
    pub fn len(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary_nodes.is_empty()
    }
}

/// Global and per-subdomain interface layouts plus the primal numbering
/// induced by a set of per-edge constraint counts.
#[derive(Debug, Clone)]
pub struct DofSpaces {
    /// Global node ids in canonical interface order (edge blocks, vertices).
    pub interface_nodes: Vec<usize>,
    /// Per edge: offset of its block in the interface vector.
    pub edge_offsets: Vec<usize>,
    /// Offset of the vertex section.
    pub vertex_offset: usize,
    /// Adaptive constraints per edge.
    pub constraint_counts: Vec<usize>,
    /// Per edge: primal id of its first constraint slot.
    pub edge_primal_offsets: Vec<usize>,
    /// Total primal unknowns: vertices + all edge constraints.
    pub n_primal: usize,
    pub subdomains: Vec<SubdomainDofs>,
}

impl DofSpaces {
    pub fn n_interface(&self) -> usize {
        self.interface_nodes.len()
    }

    /// Primal id of cross vertex `v`.
    pub fn vertex_primal_id(&self, v: usize) -> usize {
        v
    }

    /// Primal id of constraint `m` on edge `e`.
    pub fn edge_constraint_primal_id(&self, e: usize, m: usize) -> usize {
        debug_assert!(m < self.constraint_counts[e]);
        self.edge_primal_offsets[e] + m
    }
}

/// Build the interface layouts for the given per-edge constraint counts.
///
/// This is the layout-only variant used when the constraint vectors are not
/// needed (vertex-only coarse spaces, layout planning); constraint content is
/// validated by [`build_restrictions`].
pub fn build_restrictions_with_counts(
    partition: &Partition,
    classes: &InterfaceClasses,
    counts: &[usize],
) -> Result<DofSpaces> {
    if counts.len() != classes.edges.len() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "{} constraint counts for {} edges",
                counts.len(),
                classes.edges.len()
            ),
        });
    }
    for edge in &classes.edges {
        if counts[edge.id] > edge.nodes.len() {
            return Err(Error::NotEnoughEigenvectors {
                edge: edge.id,
                requested: counts[edge.id],
                available: edge.nodes.len(),
            });
        }
    }

    let mut interface_nodes = Vec::new();
    let mut edge_offsets = Vec::with_capacity(classes.edges.len());
    let mut node_to_interface = std::collections::HashMap::new();
    for edge in &classes.edges {
        edge_offsets.push(interface_nodes.len());
        for &node in &edge.nodes {
            node_to_interface.insert(node, interface_nodes.len());
            interface_nodes.push(node);
        }
    }
    let vertex_offset = interface_nodes.len();
    for vertex in &classes.vertices {
        node_to_interface.insert(vertex.node, interface_nodes.len());
        interface_nodes.push(vertex.node);
    }

    let n_vertices = classes.vertices.len();
    let mut edge_primal_offsets = Vec::with_capacity(classes.edges.len());
    let mut next_primal = n_vertices;
    for edge in &classes.edges {
        edge_primal_offsets.push(next_primal);
        next_primal += counts[edge.id];
    }

    let mut subdomains = Vec::with_capacity(partition.subdomain_count());
    for s in 0..partition.subdomain_count() {
        let mut boundary_nodes = Vec::new();
        let mut edges = Vec::new();
        for eid in classes.edges_of_subdomain(s) {
            let edge = &classes.edges[eid];
            edges.push(SubdomainEdgeRef {
                edge: eid,
                offset: boundary_nodes.len(),
                len: edge.nodes.len(),
            });
            boundary_nodes.extend_from_slice(&edge.nodes);
        }
        let mut vertices = Vec::new();
        for vid in classes.vertices_of_subdomain(s) {
            vertices.push(SubdomainVertexRef {
                vertex: vid,
                offset: boundary_nodes.len(),
            });
            boundary_nodes.push(classes.vertices[vid].node);
        }
        let interface_positions = boundary_nodes
            .iter()
            .map(|node| node_to_interface[node])
            .collect();
        subdomains.push(SubdomainDofs {
            subdomain: s,
            boundary_nodes,
            interface_positions,
            edges,
            vertices,
        });
    }

    Ok(DofSpaces {
        interface_nodes,
        edge_offsets,
        vertex_offset,
        constraint_counts: counts.to_vec(),
        edge_primal_offsets,
        n_primal: next_primal,
        subdomains,
    })
}

/// Build the interface layouts for an adaptive constraint set, validating
/// that every constraint vector matches its edge's node count.
pub fn build_restrictions(
    partition: &Partition,
    classes: &InterfaceClasses,
    constraints: &AdaptiveConstraintSet,
) -> Result<DofSpaces> {
    if constraints.edges.len() != classes.edges.len() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "constraint set covers {} edges, interface has {}",
                constraints.edges.len(),
                classes.edges.len()
            ),
        });
    }
    let mut counts = vec![0usize; classes.edges.len()];
    for ec in &constraints.edges {
        let edge = classes.edges.get(ec.edge).ok_or(Error::DimensionMismatch {
            detail: format!("constraint refers to unknown edge {}", ec.edge),
        })?;
        for c in &ec.constraints {
            if c.len() != edge.nodes.len() {
                return Err(Error::ConstraintLength {
                    edge: ec.edge,
                    got: c.len(),
                    expected: edge.nodes.len(),
                });
            }
        }
        counts[ec.edge] = ec.constraints.len();
    }
    build_restrictions_with_counts(partition, classes, &counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn setup(n: usize, per_side: usize) -> (StructuredGrid, Partition, InterfaceClasses) {
        let grid = StructuredGrid::new(n).unwrap();
        let partition = partition_uniform(&grid, per_side).unwrap();
        let classes = classify_interface(&partition);
        (grid, partition, classes)
    }

    #[test]
    fn rejects_nondividing_partition() {
        let grid = StructuredGrid::new(10).unwrap();
        assert!(partition_uniform(&grid, 3).is_err());
        assert!(partition_uniform(&grid, 0).is_err());
        // 10 / 5 = 2 cells per side is allowed; 10 / 10 would leave single-cell
        // subdomains with empty edges.
        assert!(partition_uniform(&grid, 5).is_ok());
        assert!(partition_uniform(&grid, 10).is_err());
    }

    #[test]
    fn reference_partition_counts() {
        let (_, partition, classes) = setup(32, 4);
        assert_eq!(partition.subdomain_count(), 16);
        assert_eq!(classes.edges.len(), 24);
        assert!(classes.edges.iter().all(|e| e.nodes.len() == 7));
        assert_eq!(classes.vertices.len(), 9);
        assert_eq!(classes.interface_node_count(), 177);
    }

    #[test]
    fn every_interface_node_in_exactly_one_class() {
        let (grid, partition, classes) = setup(16, 4);
        let mut seen = HashSet::new();
        for edge in &classes.edges {
            for &node in &edge.nodes {
                assert!(seen.insert(node), "node {node} classified twice");
                assert_eq!(partition.node_multiplicity(node), 2);
            }
        }
        for vertex in &classes.vertices {
            assert!(seen.insert(vertex.node), "node {} classified twice", vertex.node);
            assert_eq!(partition.node_multiplicity(vertex.node), 4);
            assert_eq!(vertex.sharers.len(), 4);
        }
        // Interface nodes are exactly the free nodes with multiplicity > 1.
        for node in 0..grid.node_count() {
            if grid.is_boundary_node(node) {
                assert!(!seen.contains(&node));
            } else {
                let mult = partition.node_multiplicity(node);
                assert_eq!(mult > 1, seen.contains(&node), "node {node}");
            }
        }
    }

    #[test]
    fn interior_plus_interface_covers_free_nodes() {
        let (grid, partition, classes) = setup(8, 2);
        let mut covered = HashSet::new();
        for s in 0..partition.subdomain_count() {
            for node in partition.interior_nodes(s) {
                assert!(covered.insert(node), "interior node {node} duplicated");
            }
        }
        for edge in &classes.edges {
            covered.extend(edge.nodes.iter().copied());
        }
        covered.extend(classes.vertices.iter().map(|v| v.node));
        let free: HashSet<usize> = (0..grid.node_count())
            .filter(|&v| !grid.is_boundary_node(v))
            .collect();
        assert_eq!(covered, free);
    }

    #[test]
    fn edges_sorted_by_subdomain_pair() {
        let (_, _, classes) = setup(32, 4);
        let pairs: Vec<(usize, usize)> = classes.edges.iter().map(|e| e.subdomains).collect();
        let mut sorted = pairs.clone();
        sorted.sort();
        assert_eq!(pairs, sorted);
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs[1], (0, 4));
        // Each subdomain pair appears at most once.
        assert_eq!(pairs.iter().collect::<HashSet<_>>().len(), pairs.len());
    }

    #[test]
    fn small_partition_explicit_layout() {
        // n = 4, 2x2 subdomains: one interface node per edge plus the center
        // cross vertex. Node ids: (i, j) -> 5j + i.
        let (grid, partition, classes) = setup(4, 2);
        assert_eq!(classes.edges.len(), 4);
        let pairs: Vec<_> = classes.edges.iter().map(|e| e.subdomains).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(classes.edges[0].nodes, vec![grid.node_index(2, 1)]);
        assert_eq!(classes.edges[1].nodes, vec![grid.node_index(1, 2)]);
        assert_eq!(classes.edges[2].nodes, vec![grid.node_index(3, 2)]);
        assert_eq!(classes.edges[3].nodes, vec![grid.node_index(2, 3)]);
        assert_eq!(classes.vertices.len(), 1);
        assert_eq!(classes.vertices[0].node, grid.node_index(2, 2));
        assert_eq!(classes.vertices[0].sharers, vec![0, 1, 2, 3]);

        let dofs = build_restrictions_with_counts(&partition, &classes, &[0; 4]).unwrap();
        assert_eq!(dofs.interface_nodes, vec![7, 11, 13, 17, 12]);
        assert_eq!(dofs.vertex_offset, 4);
        assert_eq!(dofs.n_primal, 1);
        // Subdomain 3 sees edges 2 and 3 then the vertex.
        assert_eq!(dofs.subdomains[3].boundary_nodes, vec![13, 17, 12]);
        assert_eq!(dofs.subdomains[3].interface_positions, vec![2, 3, 4]);
    }

    #[test]
    fn reference_dof_layout_with_one_constraint_per_edge() {
        let (_, partition, classes) = setup(32, 4);
        let dofs = build_restrictions_with_counts(&partition, &classes, &[1; 24]).unwrap();
        assert_eq!(dofs.n_interface(), 177);
        assert_eq!(dofs.vertex_offset, 168);
        // 9 vertices + 24 edge constraints.
        assert_eq!(dofs.n_primal, 33);
        assert_eq!(dofs.vertex_primal_id(4), 4);
        assert_eq!(dofs.edge_constraint_primal_id(0, 0), 9);
        assert_eq!(dofs.edge_constraint_primal_id(23, 0), 32);
        for (e, &off) in dofs.edge_offsets.iter().enumerate() {
            assert_eq!(off, 7 * e);
        }

        // Local interface sizes: corner subdomain 2 edges + 1 vertex, border
        // subdomain 3 edges + 2 vertices, interior subdomain 4 edges + 4.
        assert_eq!(dofs.subdomains[0].len(), 2 * 7 + 1);
        assert_eq!(dofs.subdomains[1].len(), 3 * 7 + 2);
        assert_eq!(dofs.subdomains[5].len(), 4 * 7 + 4);

        // Local positions map to the global slots of the same nodes.
        for sd in &dofs.subdomains {
            for (local, &node) in sd.boundary_nodes.iter().enumerate() {
                assert_eq!(dofs.interface_nodes[sd.interface_positions[local]], node);
            }
        }
    }

    #[test]
    fn floating_subdomains_identified() {
        let (_, partition, _) = setup(32, 4);
        let floating: Vec<usize> = (0..16)
            .filter(|&s| !partition.touches_dirichlet_boundary(s))
            .collect();
        assert_eq!(floating, vec![5, 6, 9, 10]);
    }

    #[test]
    fn single_subdomain_has_empty_interface() {
        let (_, partition, classes) = setup(8, 1);
        assert!(classes.edges.is_empty());
        assert!(classes.vertices.is_empty());
        let dofs = build_restrictions_with_counts(&partition, &classes, &[]).unwrap();
        assert_eq!(dofs.n_interface(), 0);
        assert_eq!(dofs.n_primal, 0);
        assert!(dofs.subdomains[0].is_empty());
    }

    #[test]
    fn constraint_count_exceeding_edge_size_rejected() {
        let (_, partition, classes) = setup(8, 2);
        // Edges have 3 nodes each at n = 8, per_side = 2.
        let result = build_restrictions_with_counts(&partition, &classes, &[4, 0, 0, 0]);
        assert!(matches!(result, Err(Error::NotEnoughEigenvectors { .. })));
    }
}
