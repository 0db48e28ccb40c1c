//! Numerical toolkit for forward-backward stochastic Volterra integral
//! equations (FBSVIEs) on a binary scenario tree.
//!
//! The driving noise is discretized by a non-recombining binary tree with
//! Rademacher increments `±√h`, which makes conditional expectations and the
//! one-step martingale representation *exact*. On top of that scaffolding the
//! crate provides
//!
//! * [`lattice`] — time grid, scenario tree, and a pluggable conditional
//!   expectation backend (`exact-tree` is exact and the default;
//!   `regression-mc` is a least-squares Monte Carlo variant for larger step
//!   counts),
//! * [`process`] — one- and two-parameter adapted processes, adapted
//!   M-solutions, the exponentially weighted norm, and M-completion,
//! * [`coefficients`] — generator/coefficient bundles with analytic
//!   derivatives and finite-difference self-checks,
//! * [`fsvie`] — explicit Euler solver for forward Volterra equations,
//! * [`bsvie`] — adapted M-solution solver for backward Volterra equations by
//!   Picard iteration under the weighted norm,
//! * [`control`] — variational systems, adjoint systems, the Hamiltonian and
//!   the maximum-principle condition, plus the dual pairing identity,
//! * [`lq`] — the backward linear-quadratic problem with its feedback law,
//! * [`finance`] — wealth dynamics, dynamic-risk BSVIEs, closed-form adjoints
//!   and risk-minimizing portfolios,
//! * [`presets`] — named problem instances addressable from config files.

pub mod bsvie;
pub mod coefficients;
pub mod control;
pub mod error;
pub mod finance;
pub mod fsvie;
pub mod lattice;
pub mod lq;
pub mod presets;
pub mod process;

pub use error::{Error, Result};
pub use lattice::{Lattice, ScenarioTree, TimeGrid};
pub use process::{AdaptedProcess, MSolution, TerminalFamily, TwoParamProcess};
