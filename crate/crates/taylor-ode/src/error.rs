//! Crate-wide error type.

use std::io;
use std::path::PathBuf;

/// Everything that can go wrong across the crate. Numerical failures carry
/// the quantities needed to diagnose them without re-running.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid stencil parameters p={p}, q={q}: both must be at least 1")]
    InvalidStencil { p: usize, q: usize },

    #[error("derivative stage k={k} outside 1..={max} for method order {order}")]
    InvalidStage { k: usize, order: usize, max: usize },

    #[error("partition order r={r} outside 1..={max}")]
    InvalidPartitionOrder { r: usize, max: usize },

    #[error("singular linear system: pivot magnitude {pivot:e}")]
    SingularMatrix { pivot: f64 },

    #[error("singular Schur complement: pivot {pivot:e} against norm {norm:e}")]
    SingularSchur { pivot: f64, norm: f64 },

    #[error(
        "Newton stopped after {iterations} iterations with residual {residual:e} \
         (tolerance {tolerance:e})"
    )]
    NewtonNonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
        /// Last iterate, flattened; kept for diagnostics.
        iterate: Vec<f64>,
    },

    #[error("Newton residual grew for {streak} consecutive iterations (residual {residual:e})")]
    NewtonDivergence {
        iterations: usize,
        streak: usize,
        residual: f64,
        iterate: Vec<f64>,
    },

    #[error("non-finite value during {context}")]
    Overflow { context: &'static str },

    #[error("amplification denominator Q_{order}({arg}) has magnitude {magnitude:e}")]
    SingularAmplification {
        order: usize,
        arg: f64,
        magnitude: f64,
    },

    #[error("lambda = 0 is unsupported by the forced linear closed form")]
    ZeroLambdaForcing,

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error("problem validation failed: {0}")]
    InvalidProblem(String),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
