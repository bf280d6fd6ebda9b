use thiserror::Error;

/// Errors raised by the library. Run-time failures inside an optimization loop
/// are reported through [`crate::stepper::RunStatus`] instead, so traces stay inspectable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {context}")]
    NotSpd { context: String },

    #[error("point lies on or outside the barrier boundary (min constraint value {min_value:e})")]
    Boundary { min_value: f64 },

    #[error("point is off the probability simplex (|sum - 1| = {sum_err:e}, min entry {min_entry:e})")]
    OffSimplex { sum_err: f64, min_entry: f64 },

    #[error("constraint matrix has rank {rank} but {rows} rows over {cols} columns")]
    RankDeficient { rank: usize, rows: usize, cols: usize },

    #[error("B G^-1 B^T is numerically singular; implicated constraint rows {rows:?}")]
    SingularSchur { rows: Vec<usize> },

    #[error("infeasible initial point: {0}")]
    InfeasibleStart(String),

    #[error("L(theta) + c = {value:e} is not positive, so l(theta) is not real")]
    NonPositiveShift { value: f64 },

    #[error("tangent lift residual {residual:e} exceeds tolerance {tolerance:e}")]
    IllPosedLift { residual: f64, tolerance: f64 },

    #[error("design matrix is singular on support {support:?}")]
    SingularDesign { support: Vec<usize> },

    #[error("rate regime `{regime}` needs {missing}")]
    MissingMetadata { regime: &'static str, missing: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
