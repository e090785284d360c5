//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset construction, design assembly, fitting and IO.
#[derive(Debug, Error)]
pub enum FammError {
    #[error("duplicate observation for curve {curve_id} at t = {t}")]
    DuplicateObservation { curve_id: u64, t: f64 },
    #[error("missing covariate `{name}` for curve {curve_id}")]
    MissingCovariate { name: String, curve_id: u64 },
    #[error("non-finite value in {context}")]
    InvalidValue { context: String },
    #[error("functional covariate is already centered")]
    AlreadyCentered,
    #[error("basis dimension {k} too small for degree {degree}")]
    InvalidBasisSize { k: usize, degree: usize },
    #[error("difference order {order} must be in 1..{k}")]
    InvalidPenaltyOrder { order: usize, k: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("grid needs at least 2 points, got {h}")]
    GridTooSmall { h: usize },
    #[error("invalid penalty matrix: {context}")]
    InvalidPenalty { context: String },
    #[error("value {value} outside basis range [{lo}, {hi}]")]
    BasisRangeError { value: f64, lo: f64, hi: f64 },
    #[error("empty integration window [{lo}, {hi}] for curve {curve_id}")]
    EmptyWindow { curve_id: u64, lo: f64, hi: f64 },
    #[error("smooth FPC term requires a score basis")]
    MissingBasis,
    #[error("eigenvalue {value} must be positive")]
    DegenerateEigenvalue { value: f64 },
    #[error("operation requires a common response grid across curves")]
    GridMismatch,
    #[error("need at least 2 curves, got {n}")]
    TooFewCurves { n: usize },
    #[error("covariance has no positive eigenvalues")]
    DegenerateCovariance,
    #[error("curve {curve_id} has no observed points")]
    EmptyCurve { curve_id: u64 },
    #[error("constraint rank {rank} equals coefficient dimension {dim} for term `{label}`")]
    OverConstrained {
        label: String,
        rank: usize,
        dim: usize,
    },
    #[error("penalized system is rank deficient beyond tolerance ({null_dims} null directions)")]
    RankDeficient { null_dims: usize },
    #[error("unknown term `{label}`")]
    UnknownTerm { label: String },
    #[error("unknown scenario {scenario}, expected 1..=4")]
    UnknownScenario { scenario: u32 },
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("conflicting options: {message}")]
    ConflictError { message: String },
    #[error("no random structure found: all covariance eigenvalues are non-positive")]
    NoRandomStructure,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FammError {
    /// Process exit code for the CLI: 2 input error, 3 i/o error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use FammError::*;
        match self {
            Io { .. } => 3,
            RankDeficient { .. }
            | DegenerateCovariance
            | DegenerateEigenvalue { .. }
            | NoRandomStructure => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, FammError>;
