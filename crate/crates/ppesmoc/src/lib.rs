//! Batch constrained multi-objective Bayesian optimization by entropy
//! reduction of the feasible Pareto set.
//!
//! The crate provides GP surrogates, Pareto-set sampling, an expectation
//! propagation approximation of the conditional predictive distribution,
//! the resulting batch acquisition function with analytic gradients,
//! baseline strategies, quality metrics, analytic benchmarks and an
//! experiment harness with a small CLI.

pub mod acquisition;
pub mod baselines;
pub mod harness;
pub mod metrics;
pub mod ep;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod opt;
pub mod pareto;
pub mod problems;
pub mod scalar;

pub use error::{Error, Result};
