//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("level {level} out of range (lattice has {max} levels)")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("processes belong to different lattices ({context})")]
    LatticeMismatch { context: &'static str },

    #[error("non-finite value in {context} at level {level}, node {node}")]
    NonFinite {
        context: &'static str,
        level: usize,
        node: usize,
    },

    #[error("{name}: derivative self-check failed in argument `{arg}`: |analytic - fd| = {gap:.3e} (tol {tol:.1e})")]
    DerivativeCheck {
        name: String,
        arg: &'static str,
        gap: f64,
        tol: f64,
    },

    #[error("{name}: Lipschitz self-check failed: increment {lhs:.3e} exceeds kernel bound {rhs:.3e}")]
    LipschitzCheck { name: String, lhs: f64, rhs: f64 },

    #[error("Picard iteration did not converge after {iters} sweeps (last delta {delta:.3e}, beta {beta})")]
    PicardDiverged { iters: usize, delta: f64, beta: f64 },

    #[error("fixed point `{context}` did not converge after {iters} sweeps (last delta {delta:.3e})")]
    FixedPoint {
        context: &'static str,
        iters: usize,
        delta: f64,
    },

    #[error("coefficient degenerate: {0}")]
    Degenerate(String),

    #[error("control infeasible: {0}")]
    Infeasible(String),

    #[error("unknown key `{key}` in {registry} registry")]
    UnknownKey { key: String, registry: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
