use thiserror::Error;

/// Errors raised while evaluating a coefficient expression at a point.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("negative base {base} raised to non-integer power {exponent}")]
    FractionalPowerOfNegative { base: f64, exponent: f64 },
    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),
    #[error("variable x{index} is not bound (point has dimension {dim})")]
    UnboundVariable { index: usize, dim: usize },
    #[error("expression evaluated to a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("evaluation error: {0}")]
    Evaluation(#[from] EvalError),

    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
    #[error("empty probe set")]
    EmptyProbes,

    #[error("flow integration produced a non-finite state at time {time}")]
    NonFiniteState { time: f64 },
    #[error("quadrature nodes are not sorted or do not span [t, s]")]
    UnsortedNodes,

    #[error("degenerate time interval: t = {t} must be strictly below s = {s}")]
    DegenerateInterval { t: f64, s: f64 },
    #[error("covariance is not positive definite within ellipticity bounds: {0}")]
    NonSpd(String),
    #[error("derivative order {0} exceeds the supported maximum of 4")]
    UnsupportedOrder(usize),

    #[error("quadrature budget exceeded: {needed} evaluations requested, budget {budget}")]
    QuadratureBudgetExceeded { needed: f64, budget: f64 },
    #[error("non-finite integrand value at u = {u}")]
    NonFiniteIntegrand { u: f64 },

    #[error("argument must be positive, got {0}")]
    NonPositiveArgument(f64),
    #[error("point u = {u} lies outside [{t}, {s}]")]
    OutOfInterval { u: f64, t: f64, s: f64 },

    #[error("simulated path became non-finite at step {step}")]
    NonFinitePath { step: usize },
    #[error("adaptive quadrature exceeded maximum depth on [{a}, {b}]")]
    MaxDepthExceeded { a: f64, b: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
