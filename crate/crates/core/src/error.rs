use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("manifold mismatch: expected {expected}, found {found}")]
    ManifoldMismatch { expected: String, found: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not a rotation (orthogonality error {error:.3e})")]
    NotARotation { error: f64 },

    #[error("matrix is not skew-symmetric (asymmetry {asymmetry:.3e})")]
    NotSkew { asymmetry: f64 },

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("point infeasible for control set at stage {stage} (violation {violation:.3e})")]
    Infeasible { stage: usize, violation: f64 },

    #[error("invalid trajectory: dynamics residual {residual:.3e} at state {index}")]
    InvalidTrajectory { index: usize, residual: f64 },

    #[error("operation requires a factored stage map")]
    NotFactored,

    #[error("stage {0} is not affine in the control")]
    NotAffine(usize),

    #[error("Newton iteration for the group step diverged at step {step} (residual {residual:.3e})")]
    NewtonDivergence { step: usize, residual: f64 },

    #[error("cost has no initial-state term")]
    MissingInitialCost,

    #[error("multiplier sign violation: {0}")]
    MultiplierSign(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
