//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("batch size mismatch: x0 has {left} rows, x1 has {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("batch size {size} exceeds assignment limit {limit}")]
    BatchLimit { size: usize, limit: usize },

    #[error("dense Hessian requested for dim {dim}, limit is {limit}")]
    DimensionLimit { dim: usize, limit: usize },

    #[error("convex conjugate diverged: iterate norm {norm:.3e} exceeded bound {bound:.3e}")]
    ConjugateDiverged { norm: f64, bound: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("ODE step size underflow at t={t:.6e} (h={h:.3e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("plot kind `{kind}` requires a 2-dimensional task, got dim {dim}")]
    PlotDimension { kind: String, dim: usize },

    #[error("unknown check suite `{0}`")]
    UnknownSuite(String),

    #[error("check suite `{suite}`: {failures} case(s) out of tolerance")]
    SuiteFailed { suite: String, failures: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlEmit(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
