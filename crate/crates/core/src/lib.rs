//! Regime-switching stochastic linear-quadratic control and mean-variance
//! asset-liability management.
//!
//! Coefficients are deterministic functions of time within each regime of a
//! continuous-time Markov chain. Under that restriction every backward
//! stochastic equation of the problem collapses to a coupled terminal-value
//! ODE system, which this crate integrates with classical Runge–Kutta.
//!
//! The layout follows the problem pipeline:
//!
//! - [`table`] and [`market`]: sampled coefficient tables, the LQ and
//!   mean-variance data models, and assumption checks.
//! - [`chain`]: generator validation, occupation law, exact path sampling.
//! - [`backward`]: Riccati, linear, feasibility and h-systems, plus the
//!   Picard (contraction) solver.
//! - [`lq`]: feedback law and the two optimal-value routes.
//! - [`mv`]: feasibility, M-constants, Lagrange multiplier, efficient frontier.
//! - [`montecarlo`]: Euler simulation of the surplus process and verification.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature; `std` only adds parallel path simulation.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backward;
pub mod chain;
mod error;
pub mod linalg;
pub mod lq;
pub mod market;
mod math;
pub mod montecarlo;
pub mod mv;
pub mod table;

pub use error::{Error, Result};
