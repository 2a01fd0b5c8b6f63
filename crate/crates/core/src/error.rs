use thiserror::Error;

/// Errors raised anywhere in the solver laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time range: t_min = {t_min}, t_max = {t_max} (need 0 < t_min < t_max)")]
    InvalidRange { t_min: f64, t_max: f64 },
    #[error("invalid step count {0} (need at least 1)")]
    InvalidSteps(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite state after step {step}")]
    NonFiniteState { step: usize },
    #[error("step produced a non-finite output")]
    NonFiniteOutput,
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("weights are not on the simplex (sum = {sum})")]
    InvalidSimplex { sum: f64 },
    #[error("invalid concentration: {0}")]
    InvalidAlpha(String),
    #[error("point outside the simplex support: {0}")]
    SupportViolation(String),
    #[error("mode undefined: concentration {0} <= 1")]
    ModeUndefined(f64),
    #[error("argument {0} outside the function domain")]
    DomainError(f64),
    #[error("invalid arity: {0}")]
    InvalidArity(String),
    #[error("invalid step parameters: {0}")]
    InvalidParams(String),
    #[error("checkpoint schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("checkpoint invariant violated: {0}")]
    InvariantViolation(String),
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("group of {0} rollouts is too small for a leave-one-out baseline")]
    GroupTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
