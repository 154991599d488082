use std::collections::BTreeMap;

use crate::diff::Scalar;
use crate::graph::{offsets, BlockSparseJacobian};

use super::SolveError;

/// Symmetric matrix stored as full diagonal blocks plus the strictly lower
/// off-diagonal blocks. A lower block `(i, j)` also stands for its transpose
/// at `(j, i)`.
#[derive(Debug, Clone)]
pub struct BlockSparseSym<S> {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    pub(crate) diag: Vec<Vec<S>>,
    pub(crate) lower: Vec<BTreeMap<usize, Vec<S>>>,
}

impl<S: Scalar> BlockSparseSym<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        BlockSparseSym {
            dims: dims.to_vec(),
            offsets: offsets(dims),
            diag: dims.iter().map(|&d| vec![S::zero(); d * d]).collect(),
            lower: vec![BTreeMap::new(); dims.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn n_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn diag_block(&self, i: usize) -> &[S] {
        &self.diag[i]
    }

    /// Lower block `(i, j)` with `i > j`, if structurally present.
    pub fn lower_block(&self, i: usize, j: usize) -> Option<&[S]> {
        self.lower[i].get(&j).map(Vec::as_slice)
    }

    /// Structural nonzero blocks `(i, j)` with `i ≥ j`.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.dims.len() {
            for &j in self.lower[i].keys() {
                out.push((i, j));
            }
            out.push((i, i));
        }
        out
    }

    /// Adds `block` (`dims[i] × dims[j]`, row-major) at `(i, j)`.
    pub fn add_block(&mut self, i: usize, j: usize, block: &[S]) {
        let (di, dj) = (self.dims[i], self.dims[j]);
        debug_assert_eq!(block.len(), di * dj);
        if i == j {
            for (a, &b) in self.diag[i].iter_mut().zip(block) {
                *a = *a + b;
            }
        } else if i > j {
            let dst = self.lower[i]
                .entry(j)
                .or_insert_with(|| vec![S::zero(); di * dj]);
            for (a, &b) in dst.iter_mut().zip(block) {
                *a = *a + b;
            }
        } else {
            let t = crate::diff::transpose(block, di, dj);
            self.add_block(j, i, &t);
        }
    }

    /// All stored entries in a fixed order: diagonal blocks, then lower
    /// blocks by row and column.
    pub(crate) fn entries(&self) -> Vec<S> {
        let mut out: Vec<S> = self.diag.iter().flatten().copied().collect();
        for row in &self.lower {
            for b in row.values() {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(&S) -> T) -> BlockSparseSym<T> {
        BlockSparseSym {
            dims: self.dims.clone(),
            offsets: self.offsets.clone(),
            diag: self
                .diag
                .iter()
                .map(|b| b.iter().map(&f).collect())
                .collect(),
            lower: self
                .lower
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|(&j, b)| (j, b.iter().map(&f).collect()))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn values(&self) -> BlockSparseSym<f64> {
        self.map(Scalar::value)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut m = vec![0.0; n * n];
        for (i, b) in self.diag.iter().enumerate() {
            let (o, d) = (self.offsets[i], self.dims[i]);
            for p in 0..d {
                for q in 0..d {
                    m[(o + p) * n + o + q] = b[p * d + q].value();
                }
            }
        }
        for (i, row) in self.lower.iter().enumerate() {
            for (&j, b) in row {
                let (oi, di, oj, dj) =
                    (self.offsets[i], self.dims[i], self.offsets[j], self.dims[j]);
                for p in 0..di {
                    for q in 0..dj {
                        let v = b[p * dj + q].value();
                        m[(oi + p) * n + oj + q] = v;
                        m[(oj + q) * n + oi + p] = v;
                    }
                }
            }
        }
        m
    }
}

impl BlockSparseSym<f64> {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        for (i, b) in self.diag.iter().enumerate() {
            let (o, d) = (self.offsets[i], self.dims[i]);
            for p in 0..d {
                let mut s = 0.0;
                for q in 0..d {
                    s += b[p * d + q] * x[o + q];
                }
                y[o + p] += s;
            }
        }
        for (i, row) in self.lower.iter().enumerate() {
            let (oi, di) = (self.offsets[i], self.dims[i]);
            for (&j, b) in row {
                let (oj, dj) = (self.offsets[j], self.dims[j]);
                for p in 0..di {
                    for q in 0..dj {
                        let v = b[p * dj + q];
                        y[oi + p] += v * x[oj + q];
                        y[oj + q] += v * x[oi + p];
                    }
                }
            }
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (i, b) in self.diag.iter().enumerate() {
            let d = self.dims[i];
            out.extend((0..d).map(|p| b[p * d + p]));
        }
        out
    }

    /// `H + λ·diag(H)`.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for (i, b) in out.diag.iter_mut().enumerate() {
            let d = self.dims[i];
            for p in 0..d {
                b[p * d + p] *= 1.0 + lambda;
            }
        }
        out
    }
}

/// `H = JᵀJ` and `g = −Jᵀr`, assembled block by block in `S` arithmetic.
pub fn normal_equations<S: Scalar>(j: &BlockSparseJacobian<S>) -> (BlockSparseSym<S>, Vec<S>) {
    let dims = &j.tangent_dims;
    let offs = offsets(dims);
    let mut h = BlockSparseSym::zeros(dims);
    let mut g = vec![S::zero(); j.n_cols()];
    for row in &j.rows {
        let m = row.residual.len();
        // columns of every block, so each product entry is one dot
        let cols: Vec<Vec<Vec<S>>> = row
            .blocks
            .iter()
            .map(|(v, b)| {
                let d = dims[*v];
                (0..d)
                    .map(|q| (0..m).map(|r| b[r * d + q]).collect())
                    .collect()
            })
            .collect();
        for (a, (va, _)) in row.blocks.iter().enumerate() {
            let da = dims[*va];
            for p in 0..da {
                let gp = S::dot(&cols[a][p], &row.residual);
                g[offs[*va] + p] = g[offs[*va] + p] - gp;
            }
            for (b, (vb, _)) in row.blocks.iter().enumerate() {
                if vb > va {
                    continue;
                }
                let db = dims[*vb];
                let mut block = vec![S::zero(); da * db];
                if va == vb {
                    for p in 0..da {
                        for q in 0..=p {
                            let v = S::dot(&cols[a][p], &cols[b][q]);
                            block[p * db + q] = v;
                            block[q * db + p] = v;
                        }
                    }
                } else {
                    for p in 0..da {
                        for q in 0..db {
                            block[p * db + q] = S::dot(&cols[a][p], &cols[b][q]);
                        }
                    }
                }
                h.add_block(*va, *vb, &block);
            }
        }
    }
    (h, g)
}

/// Lower block-triangular Cholesky factor with the fill pattern of the
/// natural ordering.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    diag: Vec<Vec<f64>>,
    /// `rows[i]` holds `(j, L_ij)` for `j < i`, increasing in `j`.
    rows: Vec<Vec<(usize, Vec<f64>)>>,
}

fn dense_chol_in_place(a: &mut [f64], d: usize, offset: usize) -> Result<(), SolveError> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(SolveError::Indefinite {
                pivot: offset + j,
                value: s,
            });
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = t / l;
        }
        for k in j + 1..d {
            a[j * d + k] = 0.0;
        }
    }
    Ok(())
}

/// `A·Bᵀ` for row-major `A` (m×k) and `B` (n×k).
fn mul_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[j * k + t];
            }
            out[i * n + j] = s;
        }
    }
    out
}

impl BlockCholesky {
    pub fn factor(h: &BlockSparseSym<f64>) -> Result<Self, SolveError> {
        let n = h.n_blocks();
        let dims = h.dims.clone();
        // symbolic: row structures via the elimination tree
        let mut parent = vec![usize::MAX; n];
        let mut structure: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut mark = vec![usize::MAX; n];
        for i in 0..n {
            let mut s = Vec::new();
            mark[i] = i;
            for &j in h.lower[i].keys() {
                let mut k = j;
                while mark[k] != i {
                    mark[k] = i;
                    s.push(k);
                    if parent[k] == usize::MAX {
                        parent[k] = i;
                        break;
                    }
                    k = parent[k];
                }
            }
            s.sort_unstable();
            structure.push(s);
        }
        let mut diag: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut rows: Vec<Vec<(usize, Vec<f64>)>> = Vec::with_capacity(n);
        for i in 0..n {
            let di = dims[i];
            let mut row: Vec<(usize, Vec<f64>)> = Vec::with_capacity(structure[i].len());
            for &j in &structure[i] {
                let dj = dims[j];
                let mut b = h.lower[i]
                    .get(&j)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; di * dj]);
                // b -= Σ_k L_ik L_jkᵀ over shared k < j
                let rj = &rows[j];
                let (mut x, mut y) = (0, 0);
                while x < row.len() && y < rj.len() {
                    let (ki, lik) = &row[x];
                    let (kj, ljk) = &rj[y];
                    if ki == kj {
                        let p = mul_abt(lik, ljk, di, dj, dims[*ki]);
                        b.iter_mut().zip(p).for_each(|(a, v)| *a -= v);
                        x += 1;
                        y += 1;
                    } else if ki < kj {
                        x += 1;
                    } else {
                        y += 1;
                    }
                }
                // L_ij = b · L_jj⁻ᵀ: solve L_jj X ᵀ = bᵀ row by row
                let ljj = &diag[j];
                for r in 0..di {
                    for c in 0..dj {
                        let mut s = b[r * dj + c];
                        for t in 0..c {
                            s -= b[r * dj + t] * ljj[c * dj + t];
                        }
                        b[r * dj + c] = s / ljj[c * dj + c];
                    }
                }
                row.push((j, b));
            }
            let mut d = h.diag[i].clone();
            for (k, lik) in &row {
                let p = mul_abt(lik, lik, di, di, dims[*k]);
                d.iter_mut().zip(p).for_each(|(a, v)| *a -= v);
            }
            dense_chol_in_place(&mut d, di, h.offsets[i])?;
            diag.push(d);
            rows.push(row);
        }
        Ok(BlockCholesky {
            dims,
            offsets: h.offsets.clone(),
            diag,
            rows,
        })
    }

    /// Number of stored off-diagonal factor blocks (original plus fill).
    pub fn off_diagonal_blocks(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dims.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let (oi, di) = (self.offsets[i], self.dims[i]);
            for (j, l) in &self.rows[i] {
                let (oj, dj) = (self.offsets[*j], self.dims[*j]);
                for p in 0..di {
                    let mut s = 0.0;
                    for q in 0..dj {
                        s += l[p * dj + q] * y[oj + q];
                    }
                    y[oi + p] -= s;
                }
            }
            let l = &self.diag[i];
            for p in 0..di {
                let mut s = y[oi + p];
                for q in 0..p {
                    s -= l[p * di + q] * y[oi + q];
                }
                y[oi + p] = s / l[p * di + p];
            }
        }
        for i in (0..n).rev() {
            let (oi, di) = (self.offsets[i], self.dims[i]);
            let l = &self.diag[i];
            for p in (0..di).rev() {
                let mut s = y[oi + p];
                for q in p + 1..di {
                    s -= l[q * di + p] * y[oi + q];
                }
                y[oi + p] = s / l[p * di + p];
            }
            for (j, l) in &self.rows[i] {
                let (oj, dj) = (self.offsets[*j], self.dims[*j]);
                for q in 0..dj {
                    let mut s = 0.0;
                    for p in 0..di {
                        s += l[p * dj + q] * y[oi + p];
                    }
                    y[oj + q] -= s;
                }
            }
        }
        y
    }
}

pub fn cholesky_solve(h: &BlockSparseSym<f64>, g: &[f64]) -> Result<Vec<f64>, SolveError> {
    Ok(BlockCholesky::factor(h)?.solve(g))
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient on `H x = g`.
pub fn cg_solve(
    h: &BlockSparseSym<f64>,
    g: &[f64],
    rel_tol: f64,
    max_iters: Option<usize>,
) -> Result<CgOutcome, SolveError> {
    let n = h.dim();
    let max_iters = max_iters.unwrap_or(10 * n.max(1));
    let g_norm = norm(g);
    let mut x = vec![0.0; n];
    if g_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = h
        .diagonal()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(SolveError::Indefinite { pivot: i, value: d })
            }
        })
        .collect::<Result<_, _>>()?;
    let mut r = g.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iters {
        let hp = h.matvec(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            return Err(SolveError::Indefinite {
                pivot: it,
                value: php,
            });
        }
        let alpha = rz / php;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * hp[k];
        }
        rel = norm(&r) / g_norm;
        if rel <= rel_tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
            });
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(SolveError::NotConverged {
        iterations: max_iters,
        relative_residual: rel,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
