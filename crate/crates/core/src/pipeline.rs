//! End-to-end experiment orchestration: dataset generation, surrogate
//! training support, evaluation of surrogate-built preconditioners against
//! exact adaptive ones, and report emission.
//!
//! The flow mirrors a four-step loop:
//! 1. expand the random coefficient field in a truncated KL basis,
//! 2. generate `M` realizations and solve the per-edge interface
//!    eigenproblems to obtain training targets,
//! 3. fit the network on `(xi, eigenvector)` pairs,
//! 4. plug predicted eigenvectors into the BDDC coarse space and compare
//!    iteration counts and extreme eigenvalues against the exact pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{
    edge_constraints, edge_operators, AdaptiveConstraintSet, EdgeConstraints, EdgeOperators,
    SelectionRule,
};
use crate::bddc::{build_preconditioner, sanitize_constraints, solve_interface, PcgReport};
use crate::decomp::{
    build_restrictions, build_restrictions_with_counts, classify_interface, partition_uniform,
    DofSpaces, InterfaceClasses, Partition,
};
use crate::error::{Error, Result};
use crate::grid::{assemble, direct_solve, CoefficientField, StructuredGrid};
use crate::schur::{build_all_subdomains, reconstruct_solution, SubdomainSystem};
use crate::stochastic::{
    brownian_basis, draw_sample, expected_random_exponent, exponential_basis, load_raster,
    realize_field, ExpectedField, KlBasis,
};
use crate::surrogate::{nrmse, Dataset, LayoutMeta, SurrogateModel, TrainConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_n() -> usize {
    32
}
fn default_per_side() -> usize {
    4
}
fn default_source() -> f64 {
    1.0
}
fn default_family() -> String {
    "brownian".into()
}
fn default_sigma2() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.25
}
fn default_expected() -> String {
    "smooth-trig".into()
}
fn default_r_terms() -> usize {
    4
}
fn default_mean_seed() -> u64 {
    2024
}
fn default_k() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    200
}
fn default_hidden() -> Vec<usize> {
    vec![10]
}
fn default_grad_min() -> f64 {
    1e-6
}
fn default_max_epochs() -> usize {
    20_000
}
fn default_train_seed() -> u64 {
    2
}
fn default_m_train() -> usize {
    500
}
fn default_m_test() -> usize {
    100
}
fn default_train_base_seed() -> u64 {
    10_000
}
fn default_test_base_seed() -> u64 {
    20_000
}
fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Fine mesh resolution (cells per side of the unit square).
    #[serde(default = "default_n")]
    pub n: usize,
    /// Subdomains per side of the uniform partition.
    #[serde(default = "default_per_side")]
    pub per_side: usize,
    /// Constant source density of the model problem.
    #[serde(default = "default_source")]
    pub source: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    /// Covariance family: "brownian" or "exponential".
    #[serde(default = "default_family")]
    pub family: String,
    /// Variance of the exponential covariance (ignored for Brownian).
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "default_eta")]
    pub eta1: f64,
    #[serde(default = "default_eta")]
    pub eta2: f64,
    /// Mean of the log field: "constant:<v>", "random-exponent",
    /// "smooth-trig", or "raster:<path>".
    #[serde(default = "default_expected")]
    pub expected: String,
    /// KL truncation level R.
    #[serde(default = "default_r_terms")]
    pub r_terms: usize,
    /// Seed freezing the random-exponent mean field.
    #[serde(default = "default_mean_seed")]
    pub mean_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    /// Adaptive constraints per interface edge.
    #[serde(default = "default_k")]
    pub k_per_edge: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PcgSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden-layer widths.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_grad_min")]
    pub grad_min: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Weight-initialization seed.
    #[serde(default = "default_train_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplesSection {
    #[serde(default = "default_m_train")]
    pub m_train: usize,
    #[serde(default = "default_m_test")]
    pub m_test: usize,
    /// Base seed of the training stream (sample i uses base + i).
    #[serde(default = "default_train_base_seed")]
    pub train_seed: u64,
    #[serde(default = "default_test_base_seed")]
    pub test_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Default artifact directory when the CLI gives no --out.
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

impl Default for GridSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for FieldSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for CoarseSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for PcgSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for NetworkSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for SamplesSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}
impl Default for OutputSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

/// Full experiment description; every artifact is stamped with its hash.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub coarse: CoarseSection,
    #[serde(default)]
    pub pcg: PcgSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub samples: SamplesSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Desk-scale preset: small sample counts and epoch budget for quick runs.
pub fn desk_preset() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Full-scale preset: 10,000 training samples, 500 test samples, one
/// million epochs. Same geometry as the desk preset; expect hours of
/// single-core compute.
pub fn paper_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.samples.m_train = 10_000;
    cfg.samples.m_test = 500;
    cfg.train.max_epochs = 1_000_000;
    cfg
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n < 2 {
            return Err(Error::Config {
                detail: format!("grid.n must be at least 2, got {}", self.grid.n),
            });
        }
        if self.grid.per_side < 2 {
            return Err(Error::Config {
                detail: "grid.per_side must be at least 2 (one interface edge)".into(),
            });
        }
        if self.grid.n % self.grid.per_side != 0 || self.grid.n / self.grid.per_side < 2 {
            return Err(Error::Config {
                detail: format!(
                    "grid.per_side {} must divide grid.n {} into subdomains of \
                     at least 2 cells per side",
                    self.grid.per_side, self.grid.n
                ),
            });
        }
        if !matches!(self.field.family.as_str(), "brownian" | "exponential") {
            return Err(Error::Config {
                detail: format!(
                    "field.family must be 'brownian' or 'exponential', got '{}'",
                    self.field.family
                ),
            });
        }
        if self.field.r_terms == 0 {
            return Err(Error::Config {
                detail: "field.r_terms must be positive".into(),
            });
        }
        if self.coarse.k_per_edge == 0 {
            return Err(Error::Config {
                detail: "coarse.k_per_edge must be positive".into(),
            });
        }
        if !(self.pcg.tol > 0.0 && self.pcg.tol < 1.0) || self.pcg.max_iter == 0 {
            return Err(Error::Config {
                detail: "pcg.tol must lie in (0, 1) and pcg.max_iter be positive".into(),
            });
        }
        if !self.grid.source.is_finite() {
            return Err(Error::Config {
                detail: "grid.source must be finite".into(),
            });
        }
        self.expected_spec()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON rendering; stamps every artifact.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            grad_min: self.train.grad_min,
            max_epochs: self.train.max_epochs,
            ..TrainConfig::default()
        }
    }

    fn expected_spec(&self) -> Result<ExpectedSpec> {
        let s = self.field.expected.as_str();
        if let Some(v) = s.strip_prefix("constant:") {
            let value: f64 = v.parse().map_err(|_| Error::Config {
                detail: format!("invalid constant expected field '{s}'"),
            })?;
            if !value.is_finite() {
                return Err(Error::Config {
                    detail: "constant expected field must be finite".into(),
                });
            }
            return Ok(ExpectedSpec::Constant(value));
        }
        match s {
            "random-exponent" => Ok(ExpectedSpec::RandomExponent),
            "smooth-trig" => Ok(ExpectedSpec::SmoothTrig),
            _ => {
                if let Some(path) = s.strip_prefix("raster:") {
                    Ok(ExpectedSpec::Raster(path.to_string()))
                } else {
                    Err(Error::Config {
                        detail: format!(
                            "field.expected must be constant:<v>, random-exponent, \
                             smooth-trig or raster:<path>, got '{s}'"
                        ),
                    })
                }
            }
        }
    }

    pub fn kl_basis(&self) -> Result<KlBasis> {
        match self.field.family.as_str() {
            "brownian" => Ok(brownian_basis(self.field.r_terms)),
            "exponential" => exponential_basis(
                self.field.r_terms,
                self.field.sigma2,
                self.field.eta1,
                self.field.eta2,
            ),
            other => Err(Error::Config {
                detail: format!("unknown covariance family '{other}'"),
            }),
        }
    }

    pub fn expected_field(&self, grid: &StructuredGrid) -> Result<ExpectedField> {
        Ok(match self.expected_spec()? {
            ExpectedSpec::Constant(v) => ExpectedField::Constant(v),
            ExpectedSpec::RandomExponent => {
                // The exponent field is the mean of the LOG coefficient, so
                // the per-element 10^s values feed K directly.
                expected_random_exponent(grid, self.field.mean_seed)
            }
            ExpectedSpec::SmoothTrig => ExpectedField::SmoothTrig,
            ExpectedSpec::Raster(path) => {
                ExpectedField::Raster(load_raster(Path::new(&path))?)
            }
        })
    }

    /// Geometry-only setup shared by every sample of an experiment.
    pub fn build_problem(&self) -> Result<ProblemSetup> {
        let grid = StructuredGrid::new(self.grid.n)?;
        let partition = partition_uniform(&grid, self.grid.per_side)?;
        let classes = classify_interface(&partition);
        let base_dofs = build_restrictions_with_counts(
            &partition,
            &classes,
            &vec![0; classes.edges.len()],
        )?;
        let layout = LayoutMeta {
            edge_lengths: classes.edges.iter().map(|e| e.nodes.len()).collect(),
            k_per_edge: self.coarse.k_per_edge,
            input_dim: self.field.r_terms,
        };
        Ok(ProblemSetup {
            grid,
            partition,
            classes,
            base_dofs,
            layout,
        })
    }
}

enum ExpectedSpec {
    Constant(f64),
    RandomExponent,
    SmoothTrig,
    Raster(String),
}

/// Geometry, interface classification and target layout of an experiment;
/// independent of any particular coefficient realization.
pub struct ProblemSetup {
    pub grid: StructuredGrid,
    pub partition: Partition,
    pub classes: InterfaceClasses,
    /// Layout with zero adaptive counts; supplies edge offsets for the
    /// per-edge operators before constraints exist.
    pub base_dofs: DofSpaces,
    pub layout: LayoutMeta,
}

// ---------------------------------------------------------------------------
// Per-sample solver plumbing
// ---------------------------------------------------------------------------

/// Per-edge operators (Schur blocks, deluxe scalings, parallel sum) for one
/// coefficient realization.
pub fn edge_operators_for(
    setup: &ProblemSetup,
    subs: &[SubdomainSystem],
) -> Result<Vec<EdgeOperators>> {
    setup
        .classes
        .edges
        .iter()
        .map(|edge| {
            let (i, j) = edge.subdomains;
            let find = |s: usize| {
                setup.base_dofs.subdomains[s]
                    .edges
                    .iter()
                    .find(|r| r.edge == edge.id)
                    .ok_or(Error::DimensionMismatch {
                        detail: format!("edge {} missing from subdomain {s}", edge.id),
                    })
            };
            let ri = find(i)?;
            let rj = find(j)?;
            edge_operators(
                edge.id,
                subs[i].schur(),
                ri.offset,
                subs[j].schur(),
                rj.offset,
                ri.len,
            )
        })
        .collect()
}

/// Exact adaptive constraints: top-k eigenvectors of every edge
/// eigenproblem. Also returns the ids of edges whose selection was
/// near-degenerate (ill-conditioned surrogate targets).
pub fn exact_constraint_set(
    edge_ops: &[EdgeOperators],
    k: usize,
) -> Result<(AdaptiveConstraintSet, Vec<usize>)> {
    let mut edges = Vec::with_capacity(edge_ops.len());
    let mut near = Vec::new();
    for ops in edge_ops {
        let ec = edge_constraints(ops, SelectionRule::FixedCount(k))?;
        if ec.near_degenerate {
            near.push(ec.edge);
        }
        edges.push(ec);
    }
    Ok((AdaptiveConstraintSet { edges }, near))
}

/// Constraint set with no adaptive constraints (vertex primal dofs only).
pub fn vertex_only_set(classes: &InterfaceClasses) -> AdaptiveConstraintSet {
    AdaptiveConstraintSet {
        edges: classes
            .edges
            .iter()
            .map(|e| EdgeConstraints {
                edge: e.id,
                eigenvalues: vec![],
                vectors: vec![],
                constraints: vec![],
                near_degenerate: false,
            })
            .collect(),
    }
}

/// Flatten the selected eigenvectors into one row (edge-id order, then
/// selection order within each edge) — the surrogate's training target.
pub fn flatten_targets(set: &AdaptiveConstraintSet) -> Vec<f64> {
    let mut row = Vec::new();
    for ec in &set.edges {
        for v in &ec.vectors {
            row.extend_from_slice(v.as_slice());
        }
    }
    row
}

/// Unit-normalize a predicted eigenvector. Returns `None` when the
/// prediction is numerically zero (norm below `1e-12`) and the edge must
/// fall back to vertex-only constraints. Vectors already at unit norm
/// (within 32 ulps) pass through bitwise unchanged so exact targets stay
/// exact.
fn normalize_prediction(v: DVector<f64>) -> Option<DVector<f64>> {
    let norm = v.norm();
    if norm < 1e-12 {
        return None;
    }
    if (norm - 1.0).abs() <= 32.0 * f64::EPSILON {
        Some(v)
    } else {
        Some(v / norm)
    }
}

/// Build the constraint set from one predicted row. Per edge: slice k
/// vectors, re-normalize each, convert to constraints through the parallel
/// sum. Any degenerate vector drops the whole edge to vertex-only; the
/// second return value counts such edges.
pub fn predicted_constraint_set(
    setup: &ProblemSetup,
    edge_ops: &[EdgeOperators],
    row: &[f64],
) -> Result<(AdaptiveConstraintSet, usize)> {
    let k = setup.layout.k_per_edge;
    let expected = setup.layout.output_dim();
    if row.len() != expected {
        return Err(Error::LayoutMismatch {
            got: format!("prediction row of width {}", row.len()),
            expected: format!("width {expected}"),
        });
    }
    let mut edges = Vec::with_capacity(edge_ops.len());
    let mut fallback = 0usize;
    let mut at = 0usize;
    for ops in edge_ops {
        let len = ops.len();
        let mut vectors = Vec::with_capacity(k);
        let mut degenerate = false;
        for _ in 0..k {
            let v = DVector::from_column_slice(&row[at..at + len]);
            at += len;
            match normalize_prediction(v) {
                Some(u) => vectors.push(u),
                None => degenerate = true,
            }
        }
        if degenerate {
            fallback += 1;
            vectors.clear();
        }
        let constraints: Vec<DVector<f64>> =
            vectors.iter().map(|v| ops.constraint_for(v)).collect();
        edges.push(EdgeConstraints {
            edge: ops.edge,
            eigenvalues: vec![f64::NAN; vectors.len()],
            vectors,
            constraints,
            near_degenerate: false,
        });
    }
    Ok((AdaptiveConstraintSet { edges }, fallback))
}

/// Outcome of one preconditioned solve compared against the direct solver.
pub struct BranchOutcome {
    pub report: PcgReport,
    pub rel_err: f64,
    pub solution: DVector<f64>,
}

/// Solve the model problem with the BDDC preconditioner built from the
/// given constraint set; `direct` is the reference solution on the full
/// node set. Dependent or zero constraints are removed before the change
/// of basis.
pub fn solve_with_constraints(
    cfg: &ExperimentConfig,
    setup: &ProblemSetup,
    field: &CoefficientField,
    mut set: AdaptiveConstraintSet,
    direct: &DVector<f64>,
) -> Result<BranchOutcome> {
    let source_value = cfg.grid.source;
    let source = move |_: f64, _: f64| source_value;
    sanitize_constraints(&mut set);
    let dofs = build_restrictions(&setup.partition, &setup.classes, &set)?;
    let subs = build_all_subdomains(&setup.grid, field, &source, &setup.partition, &dofs)?;
    let edge_ops = {
        // Operators indexed against the final layout (offsets are the same
        // as the base layout; recomputing keeps the contract local).
        let mut ops = Vec::with_capacity(setup.classes.edges.len());
        for edge in &setup.classes.edges {
            let (i, j) = edge.subdomains;
            let ri = dofs.subdomains[i]
                .edges
                .iter()
                .find(|r| r.edge == edge.id)
                .expect("edge present");
            let rj = dofs.subdomains[j]
                .edges
                .iter()
                .find(|r| r.edge == edge.id)
                .expect("edge present");
            ops.push(edge_operators(
                edge.id,
                subs[i].schur(),
                ri.offset,
                subs[j].schur(),
                rj.offset,
                ri.len,
            )?);
        }
        ops
    };
    let pre = build_preconditioner(&subs, &dofs, &setup.classes, &edge_ops, &set)?;
    let (w, report) = solve_interface(&subs, &dofs, &pre, cfg.pcg.tol, cfg.pcg.max_iter)?;
    let solution = reconstruct_solution(&setup.grid, &subs, &dofs, &w)?;
    let denom = direct.norm();
    let rel_err = if denom > 0.0 {
        (&solution - direct).norm() / denom
    } else {
        solution.norm()
    };
    Ok(BranchOutcome {
        report,
        rel_err,
        solution,
    })
}

/// Direct (banded Cholesky) reference solution for a realization.
pub fn direct_reference(
    cfg: &ExperimentConfig,
    setup: &ProblemSetup,
    field: &CoefficientField,
) -> Result<DVector<f64>> {
    let source_value = cfg.grid.source;
    let source = move |_: f64, _: f64| source_value;
    let system = assemble(&setup.grid, field, &source, None)?;
    direct_solve(&system)
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Dataset plus generation diagnostics.
pub struct GeneratedDataset {
    pub dataset: Dataset,
    /// Per sample: ids of edges whose eigenvalue selection was
    /// near-degenerate.
    pub near_degenerate: Vec<Vec<usize>>,
    /// Seeds of attempted samples that were skipped, with the reason.
    pub skipped: Vec<(u64, String)>,
}

struct SampleArtifacts {
    xi: Vec<f64>,
    targets: Vec<f64>,
    near_degenerate: Vec<usize>,
}

fn generate_sample(
    cfg: &ExperimentConfig,
    setup: &ProblemSetup,
    basis: &KlBasis,
    expected: &ExpectedField,
    xi: &[f64],
) -> Result<SampleArtifacts> {
    let field = realize_field(basis, expected, xi, &setup.grid)?;
    let source_value = cfg.grid.source;
    let source = move |_: f64, _: f64| source_value;
    let subs = build_all_subdomains(
        &setup.grid,
        &field,
        &source,
        &setup.partition,
        &setup.base_dofs,
    )?;
    let edge_ops = edge_operators_for(setup, &subs)?;
    let (set, near) = exact_constraint_set(&edge_ops, setup.layout.k_per_edge)?;
    Ok(SampleArtifacts {
        xi: xi.to_vec(),
        targets: flatten_targets(&set),
        near_degenerate: near,
    })
}

/// Generate `m` samples starting at `base_seed` (sample i uses seed
/// `base_seed + i`). Failed realizations are skipped and logged; more than
/// 1% skips aborts the run.
pub fn generate_dataset(
    cfg: &ExperimentConfig,
    m: usize,
    base_seed: u64,
) -> Result<GeneratedDataset> {
    if m == 0 {
        return Err(Error::Config {
            detail: "sample count must be positive".into(),
        });
    }
    let setup = cfg.build_problem()?;
    let basis = cfg.kl_basis()?;
    let expected = cfg.expected_field(&setup.grid)?;
    let r = setup.layout.input_dim;
    let o = setup.layout.output_dim();
    let skip_limit = m / 100; // strictly more than 1% aborts

    let mut rows: Vec<SampleArtifacts> = Vec::with_capacity(m);
    let mut seeds = Vec::with_capacity(m);
    let mut skipped: Vec<(u64, String)> = Vec::new();
    let mut index = 0u64;
    while rows.len() < m {
        let seed = base_seed.wrapping_add(index);
        index += 1;
        let sample = draw_sample(r, seed);
        match generate_sample(cfg, &setup, &basis, &expected, &sample.xi) {
            Ok(art) => {
                rows.push(art);
                seeds.push(seed);
            }
            Err(e) => {
                skipped.push((seed, e.to_string()));
                if skipped.len() > skip_limit {
                    let attempts = rows.len() + skipped.len();
                    return Err(Error::TooManySkips {
                        skipped: skipped.len(),
                        total: attempts,
                        limit_percent: 1.0,
                        first: skipped[0].1.clone(),
                    });
                }
            }
        }
    }

    let inputs = DMatrix::from_fn(m, r, |i, j| rows[i].xi[j]);
    let targets = DMatrix::from_fn(m, o, |i, j| rows[i].targets[j]);
    let near_degenerate = rows.iter().map(|a| a.near_degenerate.clone()).collect();
    Ok(GeneratedDataset {
        dataset: Dataset {
            inputs,
            targets,
            layout: setup.layout.clone(),
            sample_seeds: seeds,
            config_hash: cfg.config_hash(),
        },
        near_degenerate,
        skipped,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    r: usize,
    o: usize,
    layout: LayoutMeta,
    sample_seeds: Vec<u64>,
    config_hash: String,
    near_degenerate: Vec<Vec<usize>>,
    skipped: Vec<(u64, String)>,
}

/// Shortest round-trip decimal rendering of a float (never loses bits).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write `meta.json` and `data.csv` (rows `xi_1..xi_R,y_1..y_O`).
pub fn write_dataset(gd: &GeneratedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = DatasetMeta {
        r: gd.dataset.layout.input_dim,
        o: gd.dataset.layout.output_dim(),
        layout: gd.dataset.layout.clone(),
        sample_seeds: gd.dataset.sample_seeds.clone(),
        config_hash: gd.dataset.config_hash.clone(),
        near_degenerate: gd.near_degenerate.clone(),
        skipped: gd.skipped.clone(),
    };
    let meta_text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Message(format!("meta serialization failed: {e}")))?;
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, meta_text)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    let (m, r) = gd.dataset.inputs.shape();
    let o = gd.dataset.targets.ncols();
    let mut csv = String::new();
    let mut header: Vec<String> = (1..=r).map(|i| format!("xi_{i}")).collect();
    header.extend((1..=o).map(|i| format!("y_{i}")));
    csv.push_str(&header.join(","));
    csv.push('\n');
    for i in 0..m {
        let mut fields = Vec::with_capacity(r + o);
        for j in 0..r {
            fields.push(fmt_f64(gd.dataset.inputs[(i, j)]));
        }
        for j in 0..o {
            fields.push(fmt_f64(gd.dataset.targets[(i, j)]));
        }
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let csv_path = dir.join("data.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<GeneratedDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| {
        Error::MalformedDataset {
            detail: format!("meta.json: {e}"),
        }
    })?;
    if meta.r != meta.layout.input_dim || meta.o != meta.layout.output_dim() {
        return Err(Error::MalformedDataset {
            detail: "meta.json r/o disagree with layout".into(),
        });
    }
    let csv_path = dir.join("data.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::MalformedDataset {
        detail: "data.csv is empty".into(),
    })?;
    let width = meta.r + meta.o;
    if header.split(',').count() != width {
        return Err(Error::MalformedDataset {
            detail: format!(
                "data.csv header has {} columns, expected {width}",
                header.split(',').count()
            ),
        });
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut m = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::MalformedDataset {
                detail: format!(
                    "data.csv row {} has {} fields, expected {width}",
                    lineno + 2,
                    fields.len()
                ),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::MalformedDataset {
                detail: format!("data.csv row {}: invalid number '{f}'", lineno + 2),
            })?;
            if c < meta.r {
                inputs.push(v);
            } else {
                targets.push(v);
            }
        }
        m += 1;
    }
    if meta.sample_seeds.len() != m {
        return Err(Error::MalformedDataset {
            detail: format!(
                "meta.json lists {} seeds but data.csv has {m} rows",
                meta.sample_seeds.len()
            ),
        });
    }
    let inputs = DMatrix::from_fn(m, meta.r, |i, j| inputs[i * meta.r + j]);
    let targets = DMatrix::from_fn(m, meta.o, |i, j| targets[i * meta.o + j]);
    let gd = GeneratedDataset {
        dataset: Dataset {
            inputs,
            targets,
            layout: meta.layout,
            sample_seeds: meta.sample_seeds,
            config_hash: meta.config_hash,
        },
        near_degenerate: meta.near_degenerate,
        skipped: meta.skipped,
    };
    gd.dataset.validate()?;
    Ok(gd)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-sample comparison of the exact and surrogate-built preconditioners.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub sample: usize,
    pub seed: u64,
    pub iterations_true: usize,
    pub iterations_pred: usize,
    pub lambda_min_true: f64,
    pub lambda_min_pred: f64,
    pub lambda_max_true: f64,
    pub lambda_max_pred: f64,
    pub rel_err_true: f64,
    pub rel_err_pred: f64,
    /// Edges that fell back to vertex-only constraints on the predicted
    /// branch (degenerate predictions).
    pub fallback_edges: usize,
    /// Near-degenerate eigenvalue selections on the true branch.
    pub near_degenerate_edges: usize,
}

fn ritz_pair(report: &PcgReport) -> Result<(f64, f64)> {
    match (report.lambda_min, report.lambda_max) {
        (Some(lo), Some(hi)) => Ok((lo, hi)),
        _ => Err(Error::Message(
            "PCG run produced no spectrum estimates".into(),
        )),
    }
}

/// Evaluate a prediction matrix (rows = test samples) against exact
/// adaptive BDDC on every test realization. Predictions may come from the
/// trained network or — for the oracle closure — be the targets themselves.
pub fn evaluate_predictions(
    cfg: &ExperimentConfig,
    test: &GeneratedDataset,
    predictions: &DMatrix<f64>,
) -> Result<Vec<EvaluationRecord>> {
    test.dataset.validate()?;
    let setup = cfg.build_problem()?;
    if setup.layout.hash() != test.dataset.layout.hash() {
        return Err(Error::LayoutMismatch {
            got: test.dataset.layout.hash(),
            expected: setup.layout.hash(),
        });
    }
    if predictions.shape() != test.dataset.targets.shape() {
        return Err(Error::LayoutMismatch {
            got: format!("{:?}", predictions.shape()),
            expected: format!("{:?}", test.dataset.targets.shape()),
        });
    }
    let basis = cfg.kl_basis()?;
    let expected = cfg.expected_field(&setup.grid)?;
    let source_value = cfg.grid.source;
    let source = move |_: f64, _: f64| source_value;

    let mut records = Vec::with_capacity(test.dataset.len());
    for i in 0..test.dataset.len() {
        let xi: Vec<f64> = test.dataset.inputs.row(i).iter().copied().collect();
        let field = realize_field(&basis, &expected, &xi, &setup.grid)?;
        let direct = direct_reference(cfg, &setup, &field)?;

        // Shared per-sample operators for constraint construction.
        let subs_base = build_all_subdomains(
            &setup.grid,
            &field,
            &source,
            &setup.partition,
            &setup.base_dofs,
        )?;
        let edge_ops = edge_operators_for(&setup, &subs_base)?;

        // True branch: exact eigensolves.
        let (true_set, near) = exact_constraint_set(&edge_ops, setup.layout.k_per_edge)?;
        let true_out = solve_with_constraints(cfg, &setup, &field, true_set, &direct)?;

        // Predicted branch: reshape, re-normalize, fall back where
        // degenerate.
        let row: Vec<f64> = predictions.row(i).iter().copied().collect();
        let (pred_set, fallback) = predicted_constraint_set(&setup, &edge_ops, &row)?;
        let pred_out = solve_with_constraints(cfg, &setup, &field, pred_set, &direct)?;

        let (lmin_t, lmax_t) = ritz_pair(&true_out.report)?;
        let (lmin_p, lmax_p) = ritz_pair(&pred_out.report)?;
        records.push(EvaluationRecord {
            sample: i,
            seed: test.dataset.sample_seeds[i],
            iterations_true: true_out.report.iterations,
            iterations_pred: pred_out.report.iterations,
            lambda_min_true: lmin_t,
            lambda_min_pred: lmin_p,
            lambda_max_true: lmax_t,
            lambda_max_pred: lmax_p,
            rel_err_true: true_out.rel_err,
            rel_err_pred: pred_out.rel_err,
            fallback_edges: fallback,
            near_degenerate_edges: near.len(),
        });
    }
    Ok(records)
}

/// Symmetric mean absolute percentage error
/// `(1/M) sum |q_i - p_i| / (|q_i| + |p_i|)`, with `0/0` terms defined as
/// zero; always in `[0, 1]`.
pub fn smape(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() || q.is_empty() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "sMAPE needs equal nonempty lengths, got {} and {}",
                q.len(),
                p.len()
            ),
        });
    }
    let mut acc = 0.0;
    for (a, b) in q.iter().zip(p) {
        let denom = a.abs() + b.abs();
        if denom > 0.0 {
            acc += (a - b).abs() / denom;
        }
    }
    Ok(acc / q.len() as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Aggregate metrics over an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub samples: usize,
    /// Raw-target prediction NRMSE; absent when the report was rebuilt
    /// from records only.
    pub nrmse: Option<f64>,
    pub smape_iterations: f64,
    pub smape_lambda_min: f64,
    pub smape_lambda_max: f64,
    pub linf_iterations: f64,
    pub linf_lambda_min: f64,
    pub linf_lambda_max: f64,
    pub max_rel_err_true: f64,
    pub max_rel_err_pred: f64,
    pub fallback_samples: usize,
    pub near_degenerate_samples: usize,
}

/// Compute the summary block from per-sample records.
pub fn summarize(
    records: &[EvaluationRecord],
    nrmse_value: Option<f64>,
    config_hash: &str,
) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Message("cannot summarize zero records".into()));
    }
    let it_t: Vec<f64> = records.iter().map(|r| r.iterations_true as f64).collect();
    let it_p: Vec<f64> = records.iter().map(|r| r.iterations_pred as f64).collect();
    let lmin_t: Vec<f64> = records.iter().map(|r| r.lambda_min_true).collect();
    let lmin_p: Vec<f64> = records.iter().map(|r| r.lambda_min_pred).collect();
    let lmax_t: Vec<f64> = records.iter().map(|r| r.lambda_max_true).collect();
    let lmax_p: Vec<f64> = records.iter().map(|r| r.lambda_max_pred).collect();
    let linf = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    Ok(Summary {
        config_hash: config_hash.to_string(),
        samples: records.len(),
        nrmse: nrmse_value,
        smape_iterations: smape(&it_t, &it_p)?,
        smape_lambda_min: smape(&lmin_t, &lmin_p)?,
        smape_lambda_max: smape(&lmax_t, &lmax_p)?,
        linf_iterations: linf(&it_t, &it_p),
        linf_lambda_min: linf(&lmin_t, &lmin_p),
        linf_lambda_max: linf(&lmax_t, &lmax_p),
        max_rel_err_true: records.iter().map(|r| r.rel_err_true).fold(0.0, f64::max),
        max_rel_err_pred: records.iter().map(|r| r.rel_err_pred).fold(0.0, f64::max),
        fallback_samples: records.iter().filter(|r| r.fallback_edges > 0).count(),
        near_degenerate_samples: records
            .iter()
            .filter(|r| r.near_degenerate_edges > 0)
            .count(),
    })
}

/// One histogram bin: `[lo, hi)` except the last bin which includes `hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistBin>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
    } else {
        sorted[n - 1]
    }
}

/// Freedman-Diaconis bin edges (width `2 IQR / n^(1/3)`) over the data
/// range, falling back to a square-root rule when the IQR vanishes and to
/// a single bin when the data are constant.
pub fn histogram_edges(values: &[f64]) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::Message("histogram of zero values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite histogram values"));
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Ok((0.0, vec![min, max]));
    }
    let iqr = percentile(&sorted, 0.75) - percentile(&sorted, 0.25);
    let n = values.len() as f64;
    let mut width = 2.0 * iqr / n.cbrt();
    if !(width > 0.0) {
        width = (max - min) / n.sqrt().ceil().max(1.0);
    }
    let bins = (((max - min) / width).ceil() as usize).max(1);
    let mut edges = Vec::with_capacity(bins + 1);
    for i in 0..=bins {
        edges.push(min + width * i as f64);
    }
    edges[bins] = edges[bins].max(max);
    Ok((width, edges))
}

/// Count values into precomputed edges.
pub fn histogram_counts(values: &[f64], edges: &[f64]) -> Histogram {
    let nb = edges.len() - 1;
    let (min, max) = (edges[0], edges[nb]);
    let width = if nb > 0 { edges[1] - edges[0] } else { 0.0 };
    let mut counts = vec![0usize; nb.max(1)];
    for &v in values {
        let idx = if max > min {
            (((v - min) / (max - min)) * nb as f64).floor() as usize
        } else {
            0
        };
        let idx = idx.min(counts.len() - 1);
        counts[idx] += 1;
    }
    let bins = (0..counts.len())
        .map(|i| HistBin {
            lo: edges[i.min(edges.len() - 1)],
            hi: edges[(i + 1).min(edges.len() - 1)],
            count: counts[i],
        })
        .collect();
    Histogram {
        bin_width: width,
        bins,
    }
}

const RECORD_COLUMNS: [&str; 12] = [
    "sample",
    "seed",
    "iterations_true",
    "iterations_pred",
    "lambda_min_true",
    "lambda_min_pred",
    "lambda_max_true",
    "lambda_max_pred",
    "rel_err_true",
    "rel_err_pred",
    "fallback_edges",
    "near_degenerate_edges",
];

fn records_csv(records: &[EvaluationRecord]) -> String {
    let mut out = String::new();
    out.push_str(&RECORD_COLUMNS.join(","));
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.sample,
            r.seed,
            r.iterations_true,
            r.iterations_pred,
            fmt_f64(r.lambda_min_true),
            fmt_f64(r.lambda_min_pred),
            fmt_f64(r.lambda_max_true),
            fmt_f64(r.lambda_max_pred),
            fmt_f64(r.rel_err_true),
            fmt_f64(r.rel_err_pred),
            r.fallback_edges,
            r.near_degenerate_edges,
        );
    }
    out
}

/// Parse a `records.csv` produced by [`emit_report`].
pub fn read_records_csv(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::MalformedDataset {
        detail: "records.csv is empty".into(),
    })?;
    if header != RECORD_COLUMNS.join(",") {
        return Err(Error::MalformedDataset {
            detail: "records.csv header does not match the expected columns".into(),
        });
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != RECORD_COLUMNS.len() {
            return Err(Error::MalformedDataset {
                detail: format!("records.csv row {} malformed", lineno + 2),
            });
        }
        let parse_u = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::MalformedDataset {
                detail: format!("records.csv row {}: invalid integer '{s}'", lineno + 2),
            })
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedDataset {
                detail: format!("records.csv row {}: invalid number '{s}'", lineno + 2),
            })
        };
        records.push(EvaluationRecord {
            sample: parse_u(f[0])?,
            seed: parse_f(f[1])? as u64,
            iterations_true: parse_u(f[2])?,
            iterations_pred: parse_u(f[3])?,
            lambda_min_true: parse_f(f[4])?,
            lambda_min_pred: parse_f(f[5])?,
            lambda_max_true: parse_f(f[6])?,
            lambda_max_pred: parse_f(f[7])?,
            rel_err_true: parse_f(f[8])?,
            rel_err_pred: parse_f(f[9])?,
            fallback_edges: parse_u(f[10])?,
            near_degenerate_edges: parse_u(f[11])?,
        });
    }
    Ok(records)
}

fn hist_pair_csv(true_vals: &[f64], pred_vals: &[f64]) -> Result<String> {
    let mut all = true_vals.to_vec();
    all.extend_from_slice(pred_vals);
    let (width, edges) = histogram_edges(&all)?;
    let ht = histogram_counts(true_vals, &edges);
    let hp = histogram_counts(pred_vals, &edges);
    let mut out = String::from("bin_lo,bin_hi,count_true,count_pred,bin_width\n");
    for (bt, bp) in ht.bins.iter().zip(&hp.bins) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(bt.lo),
            fmt_f64(bt.hi),
            bt.count,
            bp.count,
            fmt_f64(width)
        );
    }
    Ok(out)
}

fn hist_diff_csv(diffs: &[f64]) -> Result<String> {
    let (width, edges) = histogram_edges(diffs)?;
    let h = histogram_counts(diffs, &edges);
    let mut out = String::from("bin_lo,bin_hi,count,bin_width\n");
    for b in &h.bins {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(b.lo),
            fmt_f64(b.hi),
            b.count,
            fmt_f64(width)
        );
    }
    Ok(out)
}

/// Write `summary.json`, `records.csv` and the histogram CSVs
/// (`hist_iterations`, `hist_lambda_min`, `hist_lambda_max`, plus their
/// `_diff` variants) into `dir`. Deterministic given identical inputs.
pub fn emit_report(dir: &Path, summary: &Summary, records: &[EvaluationRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Message("cannot emit a report of zero records".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let summary_text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Message(format!("summary serialization failed: {e}")))?;
    write("summary.json", summary_text)?;
    write("records.csv", records_csv(records))?;

    let it_t: Vec<f64> = records.iter().map(|r| r.iterations_true as f64).collect();
    let it_p: Vec<f64> = records.iter().map(|r| r.iterations_pred as f64).collect();
    let lmin_t: Vec<f64> = records.iter().map(|r| r.lambda_min_true).collect();
    let lmin_p: Vec<f64> = records.iter().map(|r| r.lambda_min_pred).collect();
    let lmax_t: Vec<f64> = records.iter().map(|r| r.lambda_max_true).collect();
    let lmax_p: Vec<f64> = records.iter().map(|r| r.lambda_max_pred).collect();
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| y - x).collect()
    };
    write("hist_iterations.csv", hist_pair_csv(&it_t, &it_p)?)?;
    write("hist_lambda_min.csv", hist_pair_csv(&lmin_t, &lmin_p)?)?;
    write("hist_lambda_max.csv", hist_pair_csv(&lmax_t, &lmax_p)?)?;
    write("hist_iterations_diff.csv", hist_diff_csv(&diff(&it_t, &it_p))?)?;
    write(
        "hist_lambda_min_diff.csv",
        hist_diff_csv(&diff(&lmin_t, &lmin_p))?,
    )?;
    write(
        "hist_lambda_max_diff.csv",
        hist_diff_csv(&diff(&lmax_t, &lmax_p))?,
    )?;
    Ok(())
}

/// Train-log CSV (epoch, mse, grad_norm) for a training history.
pub fn train_log_csv(history: &crate::surrogate::TrainHistory) -> String {
    let mut out = String::from("epoch,mse,grad_norm\n");
    for r in &history.records {
        let _ = writeln!(out, "{},{},{}", r.epoch, fmt_f64(r.mse), fmt_f64(r.grad_norm));
    }
    out
}

/// Evaluate a trained model (or the oracle) against a test dataset and
/// emit the full report; returns the summary.
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    test: &GeneratedDataset,
    model: Option<&SurrogateModel>,
    out_dir: &Path,
) -> Result<Summary> {
    let predictions = match model {
        Some(m) => {
            if m.layout_hash != test.dataset.layout.hash() {
                return Err(Error::LayoutMismatch {
                    got: m.layout_hash.clone(),
                    expected: test.dataset.layout.hash(),
                });
            }
            m.predict(&test.dataset.inputs)?
        }
        None => test.dataset.targets.clone(),
    };
    let records = evaluate_predictions(cfg, test, &predictions)?;
    let quality = nrmse(&test.dataset.targets, &predictions)?;
    let summary = summarize(&records, Some(quality), &test.dataset.config_hash)?;
    emit_report(out_dir, &summary, &records)?;
    Ok(summary)
}

/// Deterministic one-problem solve for the CLI: returns the PCG report and
/// the relative error against the direct solver.
pub fn solve_once(cfg: &ExperimentConfig, rho: &RhoSpec) -> Result<SolveOutput> {
    let setup = cfg.build_problem()?;
    let field = match rho {
        RhoSpec::Constant(v) => CoefficientField::constant(&setup.grid, *v)?,
        RhoSpec::Sample(seed) => {
            let basis = cfg.kl_basis()?;
            let expected = cfg.expected_field(&setup.grid)?;
            let sample = draw_sample(setup.layout.input_dim, *seed);
            realize_field(&basis, &expected, &sample.xi, &setup.grid)?
        }
    };
    let direct = direct_reference(cfg, &setup, &field)?;
    let source_value = cfg.grid.source;
    let source = move |_: f64, _: f64| source_value;
    let subs = build_all_subdomains(
        &setup.grid,
        &field,
        &source,
        &setup.partition,
        &setup.base_dofs,
    )?;
    let edge_ops = edge_operators_for(&setup, &subs)?;
    let (set, _) = exact_constraint_set(&edge_ops, setup.layout.k_per_edge)?;
    let out = solve_with_constraints(cfg, &setup, &field, set, &direct)?;
    Ok(SolveOutput {
        config_hash: cfg.config_hash(),
        iterations: out.report.iterations,
        converged: out.report.converged,
        lambda_min: out.report.lambda_min,
        lambda_max: out.report.lambda_max,
        rel_err_vs_direct: out.rel_err,
        residuals: out.report.residuals.clone(),
    })
}

/// Coefficient-field request for the `solve` subcommand.
pub enum RhoSpec {
    Constant(f64),
    Sample(u64),
}

impl RhoSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(v) = s.strip_prefix("constant:") {
            let value: f64 = v.parse().map_err(|_| Error::Config {
                detail: format!("invalid rho spec '{s}'"),
            })?;
            return Ok(RhoSpec::Constant(value));
        }
        if let Some(v) = s.strip_prefix("sample:") {
            let seed: u64 = v.parse().map_err(|_| Error::Config {
                detail: format!("invalid rho spec '{s}'"),
            })?;
            return Ok(RhoSpec::Sample(seed));
        }
        Err(Error::Config {
            detail: format!("rho spec must be constant:<v> or sample:<seed>, got '{s}'"),
        })
    }
}

/// JSON-printable result of a single solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveOutput {
    pub config_hash: String,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub rel_err_vs_direct: f64,
    pub residuals: Vec<f64>,
}

/// Quick invariant suite for the `selftest` subcommand: exercises one
/// representative identity per module and returns the pass/fail lines.
pub fn selftest() -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| -> bool {
        lines.push(format!(
            "{} {name}{}",
            if ok { "PASS" } else { "FAIL" },
            if ok { String::new() } else { format!(": {detail}") }
        ));
        ok
    };
    let mut all = true;

    // Parallel sum of equal scalars halves them.
    let a = crate::kernels::SymMatrix::from_diagonal(&[2.0, 2.0, 2.0]);
    let ps = crate::adaptive::parallel_sum(&a, &a)?;
    let ok = (ps.as_matrix() - DMatrix::from_diagonal(&DVector::from_element(3, 1.0)))
        .norm()
        <= 1e-12;
    all &= check("parallel-sum scalar identity", ok, format!("{ps:?}"));

    // Brownian leading eigenvalue.
    let basis = brownian_basis(1);
    let expected = 16.0 / std::f64::consts::PI.powi(4);
    let got = basis.terms[0].lambda;
    let ok = (got - expected).abs() <= 1e-14;
    all &= check(
        "Brownian leading eigenvalue",
        ok,
        format!("{got} vs {expected}"),
    );

    // Exponential characteristic roots.
    let roots = crate::stochastic::find_roots(0.25, 5)?;
    let ok = roots.iter().enumerate().all(|(i, &r)| {
        let pi = std::f64::consts::PI;
        r > i as f64 * pi
            && r < (i + 1) as f64 * pi
            && crate::stochastic::exp_characteristic(r, 0.25).abs()
                <= 1e-12 * (r * r * 0.0625 + 1.0)
    });
    all &= check("exponential root residuals", ok, format!("{roots:?}"));

    // Backprop gradient against central differences on a small network.
    let mut net = crate::surrogate::MlpNetwork::new(&[3, 4, 2], 5)?;
    let x = DMatrix::from_fn(3, 6, |i, j| ((i * 7 + j * 3 + 1) as f64 * 0.13).sin());
    let y = DMatrix::from_fn(2, 6, |i, j| ((i * 5 + j * 2 + 2) as f64 * 0.17).cos());
    let (_, grad) = net.loss_and_gradient(&x, &y)?;
    let w0 = net.params();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for idx in 0..w0.len() {
        let mut wp = w0.clone();
        wp[idx] += h;
        net.set_params(&wp)?;
        let (lp, _) = net.loss_and_gradient(&x, &y)?;
        let mut wm = w0.clone();
        wm[idx] -= h;
        net.set_params(&wm)?;
        let (lm, _) = net.loss_and_gradient(&x, &y)?;
        let fd = (lp - lm) / (2.0 * h);
        let denom = grad[idx].abs().max(fd.abs()).max(1e-10);
        max_rel = max_rel.max((grad[idx] - fd).abs() / denom);
    }
    let ok = max_rel <= 1e-6;
    all &= check("backprop gradient check", ok, format!("max rel {max_rel}"));

    // Tiny end-to-end solve against the direct solver.
    let mut cfg = ExperimentConfig::default();
    cfg.grid.n = 8;
    cfg.grid.per_side = 2;
    cfg.field.r_terms = 2;
    cfg.field.expected = "constant:0".into();
    let out = solve_once(&cfg, &RhoSpec::Sample(3))?;
    let ok = out.converged && out.rel_err_vs_direct <= 1e-6;
    all &= check(
        "small adaptive BDDC solve vs direct",
        ok,
        format!("rel err {}", out.rel_err_vs_direct),
    );

    if all {
        Ok(lines)
    } else {
        Err(Error::Message(format!(
            "selftest failures:\n{}",
            lines.join("\n")
        )))
    }
}

/// Frequency map of iteration counts (handy for quick dataset summaries).
pub fn iteration_frequencies(records: &[EvaluationRecord]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for r in records {
        *map.entry(r.iterations_true).or_insert(0) += 1;
    }
    map
}
