//! Gauss-Newton and Levenberg-Marquardt over block-sparse normal equations,
//! with sparse Cholesky and Jacobi-preconditioned CG back-ends.

mod adjoint;
mod sparse;

pub use adjoint::LinearSolve;
pub use sparse::{
    cg_solve, cholesky_solve, normal_equations, BlockCholesky, BlockSparseSym, CgOutcome,
};

use thiserror::Error;

use crate::diff::Scalar;
use crate::graph::{FactorGraph, GraphError, Instance, VariableAssignment};

#[derive(Debug, Error, Clone)]
pub enum SolveError {
    #[error("matrix is not positive definite at pivot {pivot} (value {value:e})")]
    Indefinite { pivot: usize, value: f64 },
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("Levenberg-Marquardt stalled: damping {lambda:e} exceeded the limit at cost {cost}")]
    Stalled {
        lambda: f64,
        cost: f64,
        best: Box<VariableAssignment>,
    },
    #[error("Gauss-Newton step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<SolveError>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearBackend {
    Cholesky,
    /// `max_iters = None` means ten times the system dimension.
    Cg {
        rel_tol: f64,
        max_iters: Option<usize>,
    },
}

impl LinearBackend {
    pub fn cg_default() -> Self {
        LinearBackend::Cg {
            rel_tol: 1e-10,
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearMethod {
    GaussNewton,
    LevenbergMarquardt {
        lambda0: f64,
        lambda_up: f64,
        lambda_down: f64,
        lambda_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub backend: LinearBackend,
    pub method: NonlinearMethod,
    pub max_steps: usize,
    /// Stop when `‖Δ‖` falls below this.
    pub step_tol: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
}

impl SolverConfig {
    /// LM with sparse Cholesky, used for evaluating trained models.
    pub fn evaluation() -> Self {
        SolverConfig {
            backend: LinearBackend::Cholesky,
            method: NonlinearMethod::LevenbergMarquardt {
                lambda0: 1e-4,
                lambda_up: 10.0,
                lambda_down: 0.1,
                lambda_max: 1e10,
            },
            max_steps: 100,
            step_tol: 1e-10,
            cost_tol: 1e-14,
        }
    }

    /// Plain Gauss-Newton with preconditioned CG, used inside training.
    pub fn training() -> Self {
        SolverConfig {
            backend: LinearBackend::cg_default(),
            method: NonlinearMethod::GaussNewton,
            max_steps: 5,
            step_tol: 1e-10,
            cost_tol: 1e-14,
        }
    }
}

/// One Gauss-Newton update.
#[derive(Debug, Clone)]
pub struct GaussNewtonStep<S> {
    /// Stacked tangent update, one slice per variable.
    pub delta: Vec<S>,
    pub next: VariableAssignment<S>,
}

/// Solves the (optionally damped) normal equations at `x` and retracts.
pub fn gn_step<S: LinearSolve>(
    graph: &FactorGraph,
    x: &VariableAssignment<S>,
    inst: &Instance<S>,
    backend: &LinearBackend,
) -> Result<GaussNewtonStep<S>, SolveError> {
    let j = graph.linearize(x, inst)?;
    let (h, g) = normal_equations(&j);
    let delta = S::solve_spd(&h, &g, backend)?;
    let next = graph.retract(x, &delta)?;
    Ok(GaussNewtonStep { delta, next })
}

/// Outcome of a nonlinear solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: VariableAssignment,
    /// Cost after each accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub rejected: usize,
    pub converged: bool,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("initial cost is always recorded")
    }

    /// Whether the accepted-cost sequence never increases.
    pub fn monotone(&self) -> bool {
        self.costs.windows(2).all(|w| w[1] <= w[0])
    }
}

/// `‖Jᵀr‖` of the whitened problem at `x`.
pub fn gradient_norm(
    graph: &FactorGraph,
    x: &VariableAssignment,
    inst: &Instance<f64>,
) -> Result<f64, SolveError> {
    let j = graph.linearize(x, inst)?;
    let (_, g) = normal_equations(&j);
    Ok(sparse::norm(&g))
}

fn step_norm(delta: &[f64]) -> f64 {
    sparse::norm(delta)
}

/// Iterated Gauss-Newton until the step is small or `max_steps` is reached.
pub fn gn_solve(
    graph: &FactorGraph,
    x0: &VariableAssignment,
    inst: &Instance<f64>,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    let mut x = x0.clone();
    let mut costs = vec![graph.map_cost(&x, inst)?];
    let mut converged = false;
    let mut iterations = 0;
    for step in 0..config.max_steps {
        let s = gn_step(graph, &x, inst, &config.backend).map_err(|e| SolveError::Step {
            step,
            source: Box::new(e),
        })?;
        iterations += 1;
        x = s.next;
        costs.push(graph.map_cost(&x, inst)?);
        if step_norm(&s.delta) < config.step_tol {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        x,
        costs,
        iterations,
        rejected: 0,
        converged,
    })
}

/// Levenberg-Marquardt with Marquardt damping `(H + λ·diag H) Δ = g`.
pub fn lm_solve(
    graph: &FactorGraph,
    x0: &VariableAssignment,
    inst: &Instance<f64>,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    let NonlinearMethod::LevenbergMarquardt {
        lambda0,
        lambda_up,
        lambda_down,
        lambda_max,
    } = config.method
    else {
        return gn_solve(graph, x0, inst, config);
    };
    let mut x = x0.clone();
    let mut cost = graph.map_cost(&x, inst)?;
    let mut costs = vec![cost];
    let mut lambda = lambda0;
    let mut rejected = 0;
    let mut iterations = 0;
    let mut converged = false;
    'outer: while iterations < config.max_steps {
        iterations += 1;
        let j = graph.linearize(&x, inst)?;
        let (h, g) = normal_equations(&j);
        if sparse::norm(&g) == 0.0 {
            converged = true;
            break;
        }
        loop {
            let damped = h.damped(lambda);
            let delta = match adjoint::solve_f64(&damped, &g, &config.backend) {
                Ok(d) => Some(d),
                Err(SolveError::Indefinite { .. }) | Err(SolveError::NotConverged { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(delta) = delta {
                let candidate = graph.retract(&x, &delta)?;
                let new_cost = graph.map_cost(&candidate, inst).unwrap_or(f64::INFINITY);
                if new_cost <= cost {
                    let decrease = cost - new_cost;
                    x = candidate;
                    cost = new_cost;
                    costs.push(cost);
                    lambda = (lambda * lambda_down).max(1e-12);
                    if step_norm(&delta) < config.step_tol
                        || decrease <= config.cost_tol * cost.max(f64::MIN_POSITIVE)
                    {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
                if step_norm(&delta) < config.step_tol {
                    converged = true;
                    break 'outer;
                }
            }
            rejected += 1;
            lambda *= lambda_up;
            if lambda > lambda_max {
                return Err(SolveError::Stalled {
                    lambda,
                    cost,
                    best: Box::new(x),
                });
            }
        }
    }
    Ok(SolveReport {
        x,
        costs,
        iterations,
        rejected,
        converged,
    })
}

/// MAP estimate from `x0`, dispatching on the configured method.
pub fn map_inference(
    graph: &FactorGraph,
    x0: &VariableAssignment,
    inst: &Instance<f64>,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    match config.method {
        NonlinearMethod::GaussNewton => gn_solve(graph, x0, inst, config),
        NonlinearMethod::LevenbergMarquardt { .. } => lm_solve(graph, x0, inst, config),
    }
}

/// Stacked tangent vector `x ⊖ y` over all variables.
pub fn assignment_difference<S: Scalar>(
    graph: &FactorGraph,
    x: &VariableAssignment<S>,
    y: &VariableAssignment<S>,
) -> Result<Vec<S>, SolveError> {
    let mut out = Vec::with_capacity(graph.tangent_dim());
    for ((k, a), b) in graph.variables().iter().zip(x).zip(y) {
        out.extend(k.ominus(a, b).map_err(GraphError::from)?);
    }
    Ok(out)
}
