use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the solver, sampler, surrogate and pipeline.
///
/// Numerical routines return structured errors rather than panicking so the
/// sample-generation loop can log and skip a bad realization, and so the CLI
/// can distinguish configuration mistakes (exit code 2) from runtime failures
/// (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: {dim}x{dim}, max asymmetry {asymmetry:.3e} exceeds {tolerance:.3e}")]
    NotSymmetric {
        dim: usize,
        asymmetry: f64,
        tolerance: f64,
    },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("symmetric eigensolver did not converge for a {dim}x{dim} matrix (max |entry| = {scale:.3e})")]
    EigenNoConvergence { dim: usize, scale: f64 },

    #[error("eigendecomposition failed validation: {detail}")]
    EigenValidation { detail: String },

    #[error("matrix is not positive definite in {context}")]
    NotPositiveDefinite { context: String },

    #[error("right-hand matrix of the generalized eigenproblem is degenerate (numerical rank 0) in {context}")]
    DegenerateRhs { context: String },

    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },

    #[error("invalid grid resolution {n}: need n >= 2")]
    InvalidResolution { n: usize },

    #[error("degenerate element {element}: area {area:.3e} too small")]
    DegenerateElement { element: usize, area: f64 },

    #[error("coefficient field invalid at element {element}: value {value} must be finite and positive")]
    InvalidCoefficient { element: usize, value: f64 },

    #[error("partition {per_side}x{per_side} does not divide grid resolution {n}")]
    PartitionMismatch { n: usize, per_side: usize },

    #[error("constraint vector for edge {edge} has length {got}, edge has {expected} nodes")]
    ConstraintLength {
        edge: usize,
        got: usize,
        expected: usize,
    },

    #[error("requested {requested} constraints on edge {edge} but only {available} eigenvectors are available")]
    NotEnoughEigenvectors {
        edge: usize,
        requested: usize,
        available: usize,
    },

    #[error("coarse problem is not positive definite (offending subdomain {subdomain})")]
    CoarseNotSpd { subdomain: usize },

    #[error("dual block of subdomain {subdomain} is not positive definite after the change of basis")]
    DualBlockNotSpd { subdomain: usize },

    #[error("PCG did not converge within {max_iterations} iterations (relative residual {residual:.3e})")]
    PcgNoConvergence {
        max_iterations: usize,
        residual: f64,
    },

    #[error("root bracketing failed for the exponential-covariance characteristic equation: interval {index} (eta = {eta})")]
    RootBracketing { index: usize, eta: f64 },

    #[error("root refinement stalled at residual {residual:.3e} for root {index} (eta = {eta})")]
    RootResidual {
        index: usize,
        eta: f64,
        residual: f64,
    },

    #[error("raster file is malformed: {detail}")]
    MalformedRaster { detail: String },

    #[error("model file is malformed: {detail}")]
    MalformedModel { detail: String },

    #[error("dataset is malformed: {detail}")]
    MalformedDataset { detail: String },

    #[error("dataset layout hash {got} does not match expected {expected}")]
    LayoutMismatch { got: String, expected: String },

    #[error("configuration error: {detail}")]
    Config { detail: String },

    #[error("{skipped} of {total} samples failed during generation (> {limit_percent}% limit); first failure: {first}")]
    TooManySkips {
        skipped: usize,
        total: usize,
        limit_percent: f64,
        first: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Message(String),
}

impl Error {
    /// Wrap an I/O error with the path that produced it.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error: 2 for configuration
    /// problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::InvalidResolution { .. }
            | Error::PartitionMismatch { .. }
            | Error::LayoutMismatch { .. } => 2,
            _ => 1,
        }
    }
}
