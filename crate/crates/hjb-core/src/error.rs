//! Error types shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, HjbError>;

/// Errors raised by coefficient evaluation, domain handling, solvers, and
/// Monte Carlo drivers.
#[derive(Error, Debug)]
pub enum HjbError {
    /// A point lies outside the declared domain (truncation box or cone).
    #[error("point outside domain: {details}")]
    DomainViolation { details: String },

    /// Dimension of an input does not match the coefficient field or grid.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    /// The diffusion matrix A failed positive-definiteness at a sample point.
    #[error("ellipticity violation at sample {point:?}: {details}")]
    EllipticityViolation { point: Vec<f64>, details: String },

    /// A matrix expected to lie in the open SPD cone does not.
    #[error("matrix not in the SPD cone: {details}")]
    ConeViolation { details: String },

    /// Required growth/assumption parameters are missing for the active case.
    #[error("incomplete parameters for case {case}: missing {missing}")]
    IncompleteParameters { case: String, missing: String },

    /// The probe set does not cover a region a checker requires.
    #[error("probe coverage error: {details}")]
    ProbeCoverage { details: String },

    /// Fewer probe shells than a divergence trend check needs.
    #[error("insufficient probe shells: need at least {needed}, got {got}")]
    InsufficientShells { needed: usize, got: usize },

    /// A user-forced time step violates the stability bound.
    #[error("time step {dt} violates stability bound {bound}")]
    StepSizeViolation { dt: f64, bound: f64 },

    /// Non-finite values appeared during time stepping.
    #[error("numerical blow-up at t = {t}, node {node_index} (flat), value {value}")]
    BlowUp {
        t: f64,
        node_index: usize,
        value: f64,
    },

    /// An iterative solve did not reach its tolerance within its budget.
    #[error("no convergence in {what}: {details}")]
    NonConvergence { what: String, details: String },

    /// Eigen-solve failed to produce a positive principal eigenvector.
    #[error("eigen failure: {details}")]
    EigenFailure { details: String },

    /// Linear system too large for the dense-banded factorization.
    #[error("banded solve too large: rows {rows} x bandwidth {bandwidth} exceeds cap {cap}")]
    BandedTooLarge {
        rows: usize,
        bandwidth: usize,
        cap: usize,
    },

    /// A stored solution history does not cover a requested time window.
    #[error("missing solution slice: {details}")]
    MissingSlice { details: String },

    /// An estimator was asked to average an empty collection.
    #[error("empty estimate: {details}")]
    EmptyEstimate { details: String },

    /// Invalid configuration or operation inputs (validation layer).
    #[error("invalid input: {details}")]
    InvalidInput { details: String },

    /// An internal numerical identity failed its consistency tolerance.
    #[error("internal consistency check failed: {details}")]
    InternalConsistency { details: String },
}

impl HjbError {
    /// Convenience constructor for validation-style errors.
    pub fn invalid(details: impl Into<String>) -> Self {
        HjbError::InvalidInput {
            details: details.into(),
        }
    }
}
