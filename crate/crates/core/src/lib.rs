//! Discounted optimal control of partially observable piecewise deterministic
//! Markov processes (POPDMPs).
//!
//! The hidden post-jump state lives in a finite set `E⁰` and is observed only
//! through additive noise at jump times. The continuous-time problem is reduced
//! to a filtered Markov decision process over beliefs on `E⁰`, which is solved
//! by value iteration on a triangulated belief simplex. A Monte Carlo simulator
//! of the continuous-time process serves as an independent check of the
//! reduction.
//!
//! Module map:
//! - [`model`]: problem data, relaxed controls, flows and hazard integrals.
//! - [`filter`]: the substochastic joint density, Bayes update and its
//!   regularized variant, filter recursion.
//! - [`mdp`]: one-stage costs, the filtered transition kernel and the
//!   `L` / `T_f` / `T` operators.
//! - [`solver`]: simplex grid, interpolation, value iteration, policies.
//! - [`sim`]: continuous-time simulator and Monte Carlo policy evaluation.
//! - [`cli`]: configuration, subcommands and CSV export.

pub mod cli;
pub mod error;
pub mod filter;
pub mod mdp;
pub mod model;
pub mod numfmt;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
