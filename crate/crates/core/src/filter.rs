//! Extended Kalman filter over the same chain graphs the smoother uses.
//!
//! Covariances live on the tangent space with right-perturbation charts.
//! Everything is generic over [`Scalar`], so a run on tape variables can be
//! differentiated end to end.

use thiserror::Error;

use crate::diff::{cholesky_solve_dense, matmul, transpose, DenseError, Dual, Scalar, MAX_TANGENT};
use crate::graph::{FactorGraph, GraphError, Instance, VariableAssignment};
use crate::lie::{LieError, ManifoldKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("singular innovation covariance at timestep {step}: {source}")]
    Innovation {
        step: usize,
        #[source]
        source: DenseError,
    },
    #[error("graph is not a chain: {0}")]
    NotAChain(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Gaussian belief on a manifold: mean plus tangent-space covariance.
#[derive(Debug, Clone)]
pub struct Belief<S> {
    pub mean: Vec<S>,
    /// Row-major `d × d`.
    pub cov: Vec<S>,
}

impl<S: Scalar> Belief<S> {
    /// Mean with isotropic covariance `var · I`.
    pub fn isotropic(mean: Vec<S>, kind: ManifoldKind, var: f64) -> Self {
        let d = kind.tangent_dim();
        let mut cov = vec![S::zero(); d * d];
        for i in 0..d {
            cov[i * d + i] = S::constant(var);
        }
        Belief { mean, cov }
    }
}

fn symmetrize<S: Scalar>(p: &mut [S], d: usize) {
    for i in 0..d {
        for j in 0..i {
            let m = (p[i * d + j] + p[j * d + i]) * 0.5;
            p[i * d + j] = m;
            p[j * d + i] = m;
        }
    }
}

/// Propagates `belief` through the dynamics of transition factor `factor`:
/// `x' = f(x) ⊕ w` with `w ~ N(0, Q)`, `F = ∂[f(x ⊕ δ) ⊖ f(x)]/∂δ`.
pub fn ekf_predict<S: Scalar>(
    graph: &FactorGraph,
    factor: usize,
    belief: &Belief<S>,
    inst: &Instance<S>,
) -> Result<Belief<S>, FilterError> {
    let f = &graph.factors()[factor];
    let kind = graph.variables()[f.vars[0]];
    let d = kind.tangent_dim();
    debug_assert!(d <= MAX_TANGENT);
    let mean = f
        .kind
        .predict(&belief.mean)
        .ok_or_else(|| FilterError::NotAChain(format!("factor {factor} is not a transition")))?;
    let lifted: Vec<Dual<S>> = belief.mean.iter().map(|&v| Dual::lift(v)).collect();
    let delta: Vec<Dual<S>> = (0..d).map(|k| Dual::variable(S::zero(), k)).collect();
    let perturbed = kind.oplus(&lifted, &delta)?;
    let fd = f.kind.predict(&perturbed).expect("checked above");
    let base: Vec<Dual<S>> = mean.iter().map(|&v| Dual::lift(v)).collect();
    let diff = kind.ominus(&fd, &base)?;
    let mut jac = Vec::with_capacity(d * d);
    for row in &diff {
        jac.extend_from_slice(&row.eps[..d]);
    }
    let fp = matmul(&jac, &belief.cov, d, d, d);
    let mut cov = matmul(&fp, &transpose(&jac, d, d), d, d, d);
    for (i, sp) in inst.factors[factor].sqrt_prec.iter().enumerate() {
        cov[i * d + i] = cov[i * d + i] + S::one() / (*sp * *sp);
    }
    symmetrize(&mut cov, d);
    Ok(Belief { mean, cov })
}

/// Innovation update with unary factor `factor`, using its whitened residual
/// so the measurement noise becomes the identity.
pub fn ekf_update<S: Scalar>(
    graph: &FactorGraph,
    factor: usize,
    belief: &Belief<S>,
    inst: &Instance<S>,
    step: usize,
) -> Result<Belief<S>, FilterError> {
    let f = &graph.factors()[factor];
    let kind = graph.variables()[f.vars[0]];
    let d = kind.tangent_dim();
    let row = graph.linearize_factor(factor, &[&belief.mean], &inst.factors[factor])?;
    let m = row.residual.len();
    let j = &row.blocks[0].1;
    let jp = matmul(j, &belief.cov, m, d, d);
    let mut s = matmul(&jp, &transpose(j, m, d), m, d, m);
    for i in 0..m {
        s[i * m + i] = s[i * m + i] + 1.0;
    }
    // Kᵀ = S⁻¹ J P
    let kt = cholesky_solve_dense(&s, &jp, m, d)
        .map_err(|source| FilterError::Innovation { step, source })?;
    let k = transpose(&kt, m, d);
    let delta: Vec<S> = (0..d)
        .map(|i| -S::dot(&k[i * m..(i + 1) * m], &row.residual))
        .collect();
    let mean = kind.oplus(&belief.mean, &delta)?;
    // P⁺ = P − K J P
    let kjp = matmul(&k, &jp, d, m, d);
    let mut cov: Vec<S> = belief.cov.iter().zip(&kjp).map(|(&a, &b)| a - b).collect();
    symmetrize(&mut cov, d);
    Ok(Belief { mean, cov })
}

/// Filtered beliefs for every timestep of a chain graph whose variables are
/// ordered in time. Prior factors on the first variable are skipped:
/// `initial` plays their role.
pub fn ekf_run<S: Scalar>(
    graph: &FactorGraph,
    inst: &Instance<S>,
    initial: Belief<S>,
) -> Result<Vec<Belief<S>>, FilterError> {
    let n = graph.variables().len();
    let mut transitions = vec![None; n];
    let mut unary: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, f) in graph.factors().iter().enumerate() {
        if f.kind.is_transition() {
            let (a, b) = (f.vars[0], f.vars[1]);
            if b != a + 1 || transitions[b].is_some() {
                return Err(FilterError::NotAChain(format!(
                    "transition factor {i} links {a} -> {b}"
                )));
            }
            transitions[b] = Some(i);
        } else if f.vars.len() == 1 {
            if !(f.kind.is_prior() && f.vars[0] == 0) {
                unary[f.vars[0]].push(i);
            }
        } else {
            return Err(FilterError::NotAChain(format!(
                "factor {i} connects {} variables",
                f.vars.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut belief = initial;
    for t in 0..n {
        if t > 0 {
            let tf = transitions[t].ok_or_else(|| {
                FilterError::NotAChain(format!("no transition into variable {t}"))
            })?;
            belief = ekf_predict(graph, tf, &belief, inst)?;
        }
        for &u in &unary[t] {
            belief = ekf_update(graph, u, &belief, inst, t)?;
        }
        out.push(belief.clone());
    }
    Ok(out)
}

/// Filtered means only.
pub fn ekf_means<S: Scalar>(
    graph: &FactorGraph,
    inst: &Instance<S>,
    initial: Belief<S>,
) -> Result<VariableAssignment<S>, FilterError> {
    Ok(ekf_run(graph, inst, initial)?
        .into_iter()
        .map(|b| b.mean)
        .collect())
}
