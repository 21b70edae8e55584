use std::fmt;

use thiserror::Error;

/// Why an exponent set was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmissibilityReason {
    /// Two exponents share (numerically) the same real part.
    RealPartCollision,
    /// Two exponents differ by an integer multiple of the order.
    DifferenceMultipleOfN,
    /// An exponent coincides with an integer in `0..=n-3`.
    ForbiddenIntegerExponent,
}

impl fmt::Display for AdmissibilityReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::RealPartCollision => "RealPartCollision",
            Self::DifferenceMultipleOfN => "DifferenceMultipleOfN",
            Self::ForbiddenIntegerExponent => "ForbiddenIntegerExponent",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("root iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("inadmissible exponents{}: {reason}", edge_suffix(*.edge))]
    AdmissibilityViolation {
        reason: AdmissibilityReason,
        edge: Option<usize>,
    },

    #[error("arg rho = {arg} lies on or too near a sector boundary")]
    BoundaryArgument { arg: f64 },

    #[error("arg rho = {arg} is outside (-pi, pi]")]
    ArgumentOutOfRange { arg: f64 },

    #[error("complex power of zero base")]
    ZeroBase,

    #[error("Omega_{k} is degenerate (|Omega| = {magnitude:e})")]
    DegenerateOmega { k: usize, magnitude: f64 },

    #[error("indicial polynomial vanishes at xi + {shift}: resonant exponent")]
    ResonantExponent { shift: usize },

    #[error("series did not converge within {terms} terms")]
    TruncationFailure { terms: usize },

    #[error("collar Wronskian deviates from 1 by {deviation:e}")]
    WronskianDeviation { deviation: f64 },

    #[error("integration exceeded {steps} steps")]
    StepLimitExceeded { steps: usize },

    #[error("Wronskian drift {drift:e} exceeds tolerance on edge {edge}")]
    WronskianDrift { edge: usize, drift: f64 },

    #[error("step size underflow at x = {x}")]
    StepSizeUnderflow { x: f64 },

    #[error("singular linear system ({context})")]
    SingularSystem { context: String },

    #[error("sigma system for edge {edge} is singular")]
    SigmaSingular { edge: usize },

    #[error("denominator determinant for row {k} of the internal matrix is singular")]
    DenominatorSingular { k: usize },

    #[error("Weyl grid for vertex {s} does not match the reconstruction grid")]
    GridMismatch { s: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("grid guard violated: {0}")]
    GuardViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn edge_suffix(edge: Option<usize>) -> String {
    edge.map(|j| format!(" on edge {j}")).unwrap_or_default()
}

impl Error {
    /// Stable machine-readable kind name.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NonConvergence { .. } => "NonConvergence",
            Self::AdmissibilityViolation { .. } => "AdmissibilityViolation",
            Self::BoundaryArgument { .. } => "BoundaryArgument",
            Self::ArgumentOutOfRange { .. } => "ArgumentOutOfRange",
            Self::ZeroBase => "ZeroBase",
            Self::DegenerateOmega { .. } => "DegenerateOmega",
            Self::ResonantExponent { .. } => "ResonantExponent",
            Self::TruncationFailure { .. } => "TruncationFailure",
            Self::WronskianDeviation { .. } => "WronskianDeviation",
            Self::StepLimitExceeded { .. } => "StepLimitExceeded",
            Self::WronskianDrift { .. } => "WronskianDrift",
            Self::StepSizeUnderflow { .. } => "StepSizeUnderflow",
            Self::SingularSystem { .. } => "SingularSystem",
            Self::SigmaSingular { .. } => "SigmaSingular",
            Self::DenominatorSingular { .. } => "DenominatorSingular",
            Self::GridMismatch { .. } => "GridMismatch",
            Self::InvalidModel(_) => "InvalidModel",
            Self::Schema(_) => "SchemaError",
            Self::GuardViolation(_) => "GuardViolation",
            Self::Io(_) => "IoError",
        }
    }

    pub(crate) fn with_edge(self, j: usize) -> Self {
        match self {
            Self::AdmissibilityViolation { reason, .. } => Self::AdmissibilityViolation {
                reason,
                edge: Some(j),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
