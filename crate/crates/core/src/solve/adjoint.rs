use crate::diff::{Primitive, Scalar, Var};

use super::sparse::{cg_solve, cholesky_solve, BlockSparseSym};
use super::{LinearBackend, SolveError};

/// Scalars for which an SPD block system can be solved.
pub trait LinearSolve: Scalar {
    fn solve_spd(
        h: &BlockSparseSym<Self>,
        g: &[Self],
        backend: &LinearBackend,
    ) -> Result<Vec<Self>, SolveError>;
}

pub(crate) fn solve_f64(
    h: &BlockSparseSym<f64>,
    g: &[f64],
    backend: &LinearBackend,
) -> Result<Vec<f64>, SolveError> {
    match backend {
        LinearBackend::Cholesky => cholesky_solve(h, g),
        LinearBackend::Cg { rel_tol, max_iters } => match cg_solve(h, g, *rel_tol, *max_iters) {
            Ok(out) => Ok(out.x),
            // stiff systems can stall CG short of the tolerance
            Err(SolveError::NotConverged { .. }) => cholesky_solve(h, g),
            Err(e) => Err(e),
        },
    }
}

impl LinearSolve for f64 {
    fn solve_spd(
        h: &BlockSparseSym<f64>,
        g: &[f64],
        backend: &LinearBackend,
    ) -> Result<Vec<f64>, SolveError> {
        solve_f64(h, g, backend)
    }
}

impl<'t> LinearSolve for Var<'t> {
    /// Records the solve as one tape operation. The reverse rule solves
    /// `H λ = x̄` once more, then `ḡ = λ` and `H̄ = −λ xᵀ` restricted to the
    /// stored entries (an off-diagonal block collects both of its mirrored
    /// contributions).
    fn solve_spd(
        h: &BlockSparseSym<Self>,
        g: &[Self],
        backend: &LinearBackend,
    ) -> Result<Vec<Self>, SolveError> {
        let hv = h.values();
        let gv: Vec<f64> = g.iter().map(Scalar::value).collect();
        let x = solve_f64(&hv, &gv, backend)?;
        let mut inputs = h.entries();
        inputs.extend_from_slice(g);
        let Some(tape) = inputs.iter().find_map(|v| v.tape()) else {
            return Ok(x.into_iter().map(Var::constant).collect());
        };
        let backend = backend.clone();
        let xs = x.clone();
        let backward = move |xbar: &[f64]| -> Vec<f64> {
            let lambda = solve_f64(&hv, xbar, &backend)
                .or_else(|_| solve_f64(&hv, xbar, &LinearBackend::Cholesky))
                .unwrap_or_else(|_| vec![f64::NAN; xbar.len()]);
            let dims = hv.dims();
            let offs = crate::graph::offsets(dims);
            let mut out = Vec::with_capacity(hv.entries().len() + xbar.len());
            for (i, &d) in dims.iter().enumerate() {
                let o = offs[i];
                for p in 0..d {
                    for q in 0..d {
                        out.push(-lambda[o + p] * xs[o + q]);
                    }
                }
            }
            for (i, row) in hv.lower.iter().enumerate() {
                let (oi, di) = (offs[i], dims[i]);
                for &j in row.keys() {
                    let (oj, dj) = (offs[j], dims[j]);
                    for p in 0..di {
                        for q in 0..dj {
                            out.push(-(lambda[oi + p] * xs[oj + q] + lambda[oj + q] * xs[oi + p]));
                        }
                    }
                }
            }
            out.extend_from_slice(&lambda);
            out
        };
        Ok(tape.custom_op(Primitive::LinearSolve, &inputs, &x, backward))
    }
}
