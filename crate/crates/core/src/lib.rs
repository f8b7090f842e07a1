//! Transition densities of non-degenerate diffusions with unbounded drift via
//! the backward parametrix expansion, and stability bounds between a
//! diffusion and a perturbed version of it.
//!
//! The proxy density freezes the coefficients along the deterministic flow
//! of the drift ending at the terminal point, so linearly growing drifts are
//! handled without truncation.

pub mod coeffs;
pub mod error;
pub mod expr;
pub mod flow;
pub mod oracle;
pub mod parametrix;
pub mod perturb;
pub mod proxy;
pub mod quadrature;
pub mod rng;
pub mod special;

pub use coeffs::{builtin, builtin_model, check_assumptions, check_pair_assumptions, AssumptionReport, BuiltinModel, Constants, DiffusionSpec};
pub use error::{Error, EvalError, Result};
pub use expr::{parse_expr, Expr};
pub use special::{beta_fn, gamma_fn, ln_gamma};
