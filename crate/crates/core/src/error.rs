use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("a schedule needs at least one step")]
    EmptySchedule,
    #[error("beta[{index}] = {value} lies outside (0, 1)")]
    BetaOutOfRange { index: usize, value: f64 },
    #[error("cumulative alpha is not strictly decreasing in (0, 1) at step {step}")]
    NonMonotoneSchedule { step: usize },
    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("lambda^2 = {value} at step {step} outside [0, {max}]")]
    LambdaOutOfRange { step: usize, value: f64, max: f64 },
    #[error("negative radicand {0} in the forward posterior mean (lambda^2 too large)")]
    NegativeRadicand(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("times must satisfy 0 <= s < t <= T, got s = {s}, t = {t}")]
    InvalidTimes { s: f64, t: f64 },
    #[error("Monte Carlo budget must be positive")]
    ZeroBudget,
    #[error("the forward process has lambda^2 = 0 on a latent jump, so -L_elbo is infinite")]
    DegenerateProcess,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("no trajectory with {jumps} jumps ends at step {steps}")]
    InfeasibleLength { jumps: usize, steps: usize },
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("non-finite state produced at step {step}")]
    NonFiniteState { step: usize },
    #[error("moment provider does not supply {0}")]
    MissingMoment(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
}
