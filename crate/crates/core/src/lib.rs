//! Factor-graph state estimation with end-to-end learnable factors.
//!
//! The crate is organised bottom-up:
//!
//! * [`diff`]: reverse-mode tape, dual numbers and the [`diff::Scalar`] trait
//! * [`lie`]: SO(2)/SE(2) and the `⊕`/`⊖` operators
//! * [`graph`]: variables, factors, parameters, residuals and linearization
//! * [`factors`]: residual functions and task models
//! * [`solve`]: Gauss-Newton / Levenberg-Marquardt with sparse solvers
//! * [`learn`]: unrolled surrogate loss, joint NLL and training
//! * [`filter`]: extended Kalman filter baseline
//! * [`tasks`]: simulators, datasets, graph construction and metrics

pub mod diff;
pub mod factors;
pub mod filter;
pub mod graph;
pub mod learn;
pub mod lie;
pub mod solve;
pub mod tasks;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diff::DiffError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Solve(#[from] solve::SolveError),
    #[error(transparent)]
    Filter(#[from] filter::FilterError),
    #[error(transparent)]
    Learn(#[from] learn::LearnError),
    #[error(transparent)]
    Task(#[from] tasks::TaskError),
}

pub use diff::{Dual, Scalar, Tape, Var};
pub use graph::{FactorGraph, ParameterStore, VariableAssignment};
pub use lie::{ManifoldKind, Se2, So2, Twist2};
