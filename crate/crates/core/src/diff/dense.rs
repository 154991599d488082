//! Small dense row-major matrix helpers over any [`Scalar`].

use thiserror::Error;

use super::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// `a (n×k) · b (k×m)`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let bt = transpose(b, k, m);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out.push(S::dot(row, &bt[j * k..(j + 1) * k]));
        }
    }
    out
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out.push(a[i * cols + j]);
        }
    }
    out
}

pub fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        out[i * n + i] = S::one();
    }
    out
}

/// Solves `A X = B` for SPD `A` (n×n) and `B` (n×m) via Cholesky, entirely
/// in `S` arithmetic so the result stays differentiable.
pub fn cholesky_solve_dense<S: Scalar>(
    a: &[S],
    b: &[S],
    n: usize,
    m: usize,
) -> Result<Vec<S>, DenseError> {
    if a.len() != n * n || b.len() != n * m {
        return Err(DenseError::Shape(format!(
            "A has {} entries, B has {} for n={n}, m={m}",
            a.len(),
            b.len()
        )));
    }
    let mut l = vec![S::zero(); n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d = d - l[j * n + k] * l[j * n + k];
        }
        if d.value() <= 0.0 || !d.value().is_finite() {
            return Err(DenseError::NotPositiveDefinite {
                pivot: j,
                value: d.value(),
            });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s = s - l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s = s - l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    Ok(x)
}
