//! Learning factor parameters: the unrolled surrogate loss, the joint
//! negative log-likelihood, filter MSE, Adam and the training loop.

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    loss_and_gradient, supervision_weights, train, BatchDiagnostic, EpochMetrics, GradientReport,
    TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::diff::{DiffError, Scalar};
use crate::filter::{ekf_means, Belief, FilterError};
use crate::graph::{FactorGraph, GraphError, Instance, VariableAssignment};
use crate::solve::{assignment_difference, gn_step, LinearBackend, LinearSolve, SolveError};
use crate::tasks::TaskError;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("surrogate step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: SolveError,
    },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        report: Box<GradientReport>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Settings of the unrolled Gauss-Newton surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    /// Number of unrolled steps.
    pub steps: usize,
    /// Per-tangent-dimension weight applied to `X_gt ⊖ X̂` before squaring.
    pub alpha: Vec<f64>,
    pub backend: LinearBackend,
}

impl SurrogateConfig {
    pub fn new(steps: usize, alpha: Vec<f64>) -> Self {
        SurrogateConfig {
            steps,
            alpha,
            backend: LinearBackend::cg_default(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.steps == 0 {
            return Err(LearnError::Config(
                "surrogate steps must be at least 1".into(),
            ));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) || self.alpha.iter().all(|a| *a == 0.0) {
            return Err(LearnError::Config(
                "alpha must be non-negative and not all zero".into(),
            ));
        }
        Ok(())
    }
}

/// `K` Gauss-Newton steps starting from the ground truth. With `S = Var`
/// every step, including its linear solves, is recorded on the tape.
pub fn surrogate_map<S: LinearSolve>(
    graph: &FactorGraph,
    x_gt: &VariableAssignment,
    inst: &Instance<S>,
    config: &SurrogateConfig,
) -> Result<VariableAssignment<S>, LearnError> {
    let mut x: VariableAssignment<S> = x_gt
        .iter()
        .map(|v| v.iter().map(|&a| S::constant(a)).collect())
        .collect();
    for step in 0..config.steps {
        x = gn_step(graph, &x, inst, &config.backend)
            .map_err(|source| LearnError::Step { step, source })?
            .next;
    }
    Ok(x)
}

/// `Σ_t ‖α ⊙ (x_gt,t ⊖ x̂_t)‖²` with `α` repeated per variable.
pub fn weighted_error<S: Scalar>(
    graph: &FactorGraph,
    x_gt: &VariableAssignment,
    estimate: &VariableAssignment<S>,
    alpha: &[f64],
) -> Result<S, LearnError> {
    let gt: VariableAssignment<S> = x_gt
        .iter()
        .map(|v| v.iter().map(|&a| S::constant(a)).collect())
        .collect();
    let diff = assignment_difference(graph, &gt, estimate)?;
    let mut terms = Vec::with_capacity(diff.len());
    let mut off = 0;
    for kind in graph.variables() {
        let d = kind.tangent_dim();
        for k in 0..d {
            let a = alpha.get(k).copied().unwrap_or(0.0);
            if a != 0.0 {
                let w = diff[off + k] * a;
                terms.push(w * w);
            }
        }
        off += d;
    }
    Ok(S::sum(&terms))
}

pub fn surrogate_mse_loss<S: LinearSolve>(
    graph: &FactorGraph,
    x_gt: &VariableAssignment,
    inst: &Instance<S>,
    config: &SurrogateConfig,
) -> Result<S, LearnError> {
    let x = surrogate_map(graph, x_gt, inst, config)?;
    weighted_error(graph, x_gt, &x, &config.alpha)
}

/// `Σ_i ½‖Σ_i^{-1/2} r_i(X_gt)‖² + ½ log|Σ_i|` with constants dropped.
pub fn joint_nll_loss<S: Scalar>(
    graph: &FactorGraph,
    x_gt: &VariableAssignment,
    inst: &Instance<S>,
) -> Result<S, LearnError> {
    let gt: VariableAssignment<S> = x_gt
        .iter()
        .map(|v| v.iter().map(|&a| S::constant(a)).collect())
        .collect();
    let mut terms = Vec::with_capacity(2 * graph.factors().len());
    for (i, p) in inst.factors.iter().enumerate() {
        let r = graph.residual(i, &gt, inst);
        let w: Vec<S> = r.iter().zip(&p.sqrt_prec).map(|(&a, &b)| a * b).collect();
        terms.push(S::dot(&w, &w) * 0.5);
        terms.push(-S::sum(&p.log_sqrt_prec));
    }
    let loss = S::sum(&terms);
    if !loss.value().is_finite() {
        return Err(GraphError::NonFinite {
            factor: usize::MAX,
            kind: "joint nll",
        }
        .into());
    }
    Ok(loss)
}

/// Squared error of the filtered means, started from the true first state.
pub fn filter_mse_loss<S: Scalar>(
    graph: &FactorGraph,
    x_gt: &VariableAssignment,
    inst: &Instance<S>,
    alpha: &[f64],
    initial_variance: f64,
) -> Result<S, LearnError> {
    let kind = graph.variables()[0];
    let initial = Belief::isotropic(
        x_gt[0].iter().map(|&a| S::constant(a)).collect(),
        kind,
        initial_variance,
    );
    let means = ekf_means(graph, inst, initial)?;
    weighted_error(graph, x_gt, &means, alpha)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Unrolled Gauss-Newton MSE through the smoother.
    SurrogateMse,
    JointNll,
    /// MSE of EKF posterior means.
    FilterMse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::SurrogateMse => "e2e-mse",
            LossKind::JointNll => "joint-nll",
            LossKind::FilterMse => "ekf-mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "e2e-mse" | "e2e" | "surrogate-mse" => Some(LossKind::SurrogateMse),
            "joint-nll" | "nll" => Some(LossKind::JointNll),
            "ekf-mse" | "filter-mse" => Some(LossKind::FilterMse),
            _ => None,
        }
    }
}

/// Which tangent dimensions the MSE losses supervise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    Position,
    /// Velocity dimensions, each scaled by its training-set standard deviation.
    Velocity,
    All,
}

impl Supervision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Supervision::Position => "position",
            Supervision::Velocity => "velocity",
            Supervision::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "position" => Some(Supervision::Position),
            "velocity" => Some(Supervision::Velocity),
            "all" => Some(Supervision::All),
            _ => None,
        }
    }
}
