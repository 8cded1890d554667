use thiserror::Error;

/// Errors raised by tree construction, market validation and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("probabilities under node {node} at level {level} sum to {sum}, expected 1")]
    NotNormalized { level: usize, node: usize, sum: f64 },

    #[error("non-positive probability {prob} at level {level}, node {node}")]
    NonPositiveProbability {
        level: usize,
        node: usize,
        prob: f64,
    },

    #[error("node {node} at level {level} has no valid parent")]
    OrphanNode { level: usize, node: usize },

    #[error("node {node} at level {level} has no children before the horizon")]
    ChildlessNode { level: usize, node: usize },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("sub-algebra is not a coarsening of level {level}: {reason}")]
    NotACoarsening { level: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("market admits arbitrage at level {level}, node {node}")]
    Arbitrage { level: usize, node: usize },

    #[error("pricing and wealth-space constraints are infeasible at level {level}, node {node} (residual {residual:e})")]
    Infeasible {
        level: usize,
        node: usize,
        residual: f64,
    },

    #[error("aggregate state price density is not unique at level {level}, node {node} (rank {rank} < {needed})")]
    NotUnique {
        level: usize,
        node: usize,
        rank: usize,
        needed: usize,
    },

    #[error("aggregate pricing kernel is not strictly positive at level {level}, node {node} (value {value:e})")]
    NonPositiveKernel {
        level: usize,
        node: usize,
        value: f64,
    },

    #[error("endowment has zero present value")]
    ZeroPresentValue,

    #[error("root bracket failure: {0}")]
    Bracket(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("lattice too large: {points} points exceeds the cap of {cap}")]
    LatticeTooLarge { points: usize, cap: usize },

    #[error("linear algebra failure: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Error {
    Error::Dimension {
        what: what.into(),
        expected,
        got,
    }
}
