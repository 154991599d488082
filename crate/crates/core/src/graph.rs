//! Factor-graph data model: variables, Gaussian factors, residual evaluation
//! and block-sparse linearization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::diff::{lift, Dual, Scalar, Tape, Var, MAX_TANGENT};
use crate::factors::{FactorKind, Mlp};
use crate::lie::{LieError, ManifoldKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("factor {factor}: {detail}")]
    InvalidFactor { factor: usize, detail: String },
    #[error("variable {0} is not touched by any factor")]
    Isolated(usize),
    #[error("non-finite residual in factor {factor} ({kind})")]
    NonFinite { factor: usize, kind: &'static str },
    #[error("assignment has {got} values, graph has {expected} variables")]
    Assignment { expected: usize, got: usize },
    #[error("parameter slice {0:?} is already registered")]
    DuplicateSlice(String),
    #[error("unknown parameter slice {0:?}")]
    UnknownSlice(String),
    #[error("parameter slice {name:?} has {got} values, expected {expected}")]
    SliceShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Handle to a registered slice of a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat vector of every learnable quantity, with named slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: &[f64],
    ) -> Result<SliceId, GraphError> {
        if self.id(name).is_some() {
            return Err(GraphError::DuplicateSlice(name.to_string()));
        }
        let len: usize = shape.iter().product();
        if init.len() != len {
            return Err(GraphError::SliceShape {
                name: name.to_string(),
                expected: len,
                got: init.len(),
            });
        }
        let offset = self.values.len();
        self.values.extend_from_slice(init);
        self.slices.push(ParamSlice {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
        });
        Ok(SliceId(self.slices.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<SliceId> {
        self.slices.iter().position(|s| s.name == name).map(SliceId)
    }

    pub fn require(&self, name: &str) -> Result<SliceId, GraphError> {
        self.id(name)
            .ok_or_else(|| GraphError::UnknownSlice(name.to_string()))
    }

    pub fn slice(&self, id: SliceId) -> &ParamSlice {
        &self.slices[id.0]
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn get(&self, id: SliceId) -> &[f64] {
        &self.values[self.slices[id.0].range()]
    }

    pub fn get_mut(&mut self, id: SliceId) -> &mut [f64] {
        let r = self.slices[id.0].range();
        &mut self.values[r]
    }

    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<(), GraphError> {
        let id = self.require(name)?;
        let dst = self.get_mut(id);
        if dst.len() != values.len() {
            return Err(GraphError::SliceShape {
                name: name.to_string(),
                expected: dst.len(),
                got: values.len(),
            });
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The part of a full-length parameter vector that belongs to `id`.
    pub fn view<'a, S>(&self, theta: &'a [S], id: SliceId) -> &'a [S] {
        &theta[self.slices[id.0].range()]
    }

    /// Per-entry mask selecting the slices whose name starts with any of
    /// `prefixes`. An empty prefix list selects everything.
    pub fn mask(&self, prefixes: &[&str]) -> Vec<bool> {
        let mut m = vec![prefixes.is_empty(); self.len()];
        for s in &self.slices {
            if prefixes.iter().any(|p| s.name.starts_with(p)) {
                m[s.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        m
    }

    /// Records the parameters on `tape`; entries outside `trainable` become
    /// constants.
    pub fn to_tape<'t>(&self, tape: &'t Tape, trainable: &[bool]) -> Vec<Var<'t>> {
        self.values
            .iter()
            .zip(trainable)
            .map(|(&v, &t)| if t { tape.input(v) } else { Var::constant(v) })
            .collect()
    }
}

/// Source of a factor's measurement vector `z`.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    None,
    Fixed(Vec<f64>),
    /// `z = A·raw + b`, with `A` (m×m, row-major) followed by `b` in `slice`.
    Affine {
        slice: SliceId,
        raw: Vec<f64>,
    },
}

/// Diagonal Gaussian noise, parameterized by log square-root precision.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Non-learnable square-root precisions.
    Fixed(Vec<f64>),
    /// Learnable log square-root precisions. A length-1 slice is tied across
    /// all residual dimensions.
    Constant { slice: SliceId, dim: usize },
    /// Per-instance log square-root precisions from a network evaluated on
    /// `feature`. A single network output is tied across dimensions.
    Heteroscedastic {
        head: Arc<Mlp>,
        feature: f64,
        dim: usize,
    },
}

impl NoiseModel {
    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::Fixed(v) => v.len(),
            NoiseModel::Constant { dim, .. } | NoiseModel::Heteroscedastic { dim, .. } => *dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Factor {
    pub kind: FactorKind,
    pub vars: Vec<usize>,
    pub measurement: Measurement,
    pub noise: NoiseModel,
}

/// Parameter-dependent quantities of one factor, resolved for a given θ.
#[derive(Debug, Clone)]
pub struct FactorParams<S> {
    pub z: Vec<S>,
    pub log_sqrt_prec: Vec<S>,
    pub sqrt_prec: Vec<S>,
}

/// All factor parameters of a graph resolved for one θ.
#[derive(Debug, Clone)]
pub struct Instance<S> {
    pub factors: Vec<FactorParams<S>>,
}

/// Memo of network outputs keyed by network and input feature, so repeated
/// features share one evaluation (and one set of tape nodes).
pub struct HeadCache<S> {
    map: HashMap<(usize, u64), Vec<S>>,
}

impl<S> Default for HeadCache<S> {
    fn default() -> Self {
        HeadCache {
            map: HashMap::new(),
        }
    }
}

impl<S> HeadCache<S> {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Ordered manifold values, one per variable.
pub type VariableAssignment<S = f64> = Vec<Vec<S>>;

/// One row block per factor with dense blocks for each connected variable.
#[derive(Debug, Clone)]
pub struct JacobianRow<S> {
    pub factor: usize,
    /// Whitened residual.
    pub residual: Vec<S>,
    /// `(variable, block)`, block is `residual_dim × tangent_dim` row-major.
    pub blocks: Vec<(usize, Vec<S>)>,
}

#[derive(Debug, Clone)]
pub struct BlockSparseJacobian<S> {
    pub rows: Vec<JacobianRow<S>>,
    pub tangent_dims: Vec<usize>,
}

impl<S: Scalar> BlockSparseJacobian<S> {
    pub fn n_rows(&self) -> usize {
        self.rows.iter().map(|r| r.residual.len()).sum()
    }

    pub fn n_cols(&self) -> usize {
        self.tangent_dims.iter().sum()
    }

    pub fn col_offsets(&self) -> Vec<usize> {
        offsets(&self.tangent_dims)
    }

    /// Dense row-major copy of the primal values, plus the stacked residual.
    pub fn to_dense(&self) -> (Vec<f64>, Vec<f64>) {
        let cols = self.n_cols();
        let offs = self.col_offsets();
        let mut j = vec![0.0; self.n_rows() * cols];
        let mut r = Vec::with_capacity(self.n_rows());
        let mut row0 = 0;
        for row in &self.rows {
            let m = row.residual.len();
            for (v, block) in &row.blocks {
                let d = self.tangent_dims[*v];
                for a in 0..m {
                    for b in 0..d {
                        j[(row0 + a) * cols + offs[*v] + b] += block[a * d + b].value();
                    }
                }
            }
            r.extend(row.residual.iter().map(Scalar::value));
            row0 += m;
        }
        (j, r)
    }
}

pub(crate) fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for &d in dims {
        out.push(acc);
        acc += d;
    }
    out
}

/// Bipartite container of manifold variables and Gaussian factors.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    variables: Vec<ManifoldKind>,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new(variables: Vec<ManifoldKind>, factors: Vec<Factor>) -> Result<Self, GraphError> {
        let mut touched = vec![false; variables.len()];
        for (i, f) in factors.iter().enumerate() {
            let bad = |detail: String| GraphError::InvalidFactor { factor: i, detail };
            let expect = f.kind.variable_kinds();
            if expect.len() != f.vars.len() {
                return Err(bad(format!(
                    "{} connects {} variables, got {}",
                    f.kind.name(),
                    expect.len(),
                    f.vars.len()
                )));
            }
            for (&v, k) in f.vars.iter().zip(&expect) {
                let Some(&actual) = variables.get(v) else {
                    return Err(bad(format!("variable {v} does not exist")));
                };
                if actual != *k {
                    return Err(bad(format!("variable {v} is {actual:?}, expected {k:?}")));
                }
                touched[v] = true;
            }
            let dim = f.kind.residual_dim();
            if f.noise.dim() != dim {
                return Err(bad(format!(
                    "noise dimension {} differs from residual dimension {dim}",
                    f.noise.dim()
                )));
            }
        }
        if let Some(v) = touched.iter().position(|t| !t) {
            return Err(GraphError::Isolated(v));
        }
        Ok(FactorGraph { variables, factors })
    }

    pub fn variables(&self) -> &[ManifoldKind] {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn tangent_dims(&self) -> Vec<usize> {
        self.variables.iter().map(|k| k.tangent_dim()).collect()
    }

    pub fn tangent_dim(&self) -> usize {
        self.variables.iter().map(|k| k.tangent_dim()).sum()
    }

    pub fn residual_dim(&self) -> usize {
        self.factors.iter().map(|f| f.kind.residual_dim()).sum()
    }

    fn check_assignment<S>(&self, x: &VariableAssignment<S>) -> Result<(), GraphError> {
        if x.len() != self.variables.len() {
            return Err(GraphError::Assignment {
                expected: self.variables.len(),
                got: x.len(),
            });
        }
        for (k, v) in self.variables.iter().zip(x) {
            if v.len() != k.value_dim() {
                return Err(LieError::ValueDim {
                    kind: *k,
                    expected: k.value_dim(),
                    got: v.len(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Resolves every factor's measurement and noise for parameters `theta`
    /// (a full-length vector laid out like `store`).
    pub fn instantiate<S: Scalar>(
        &self,
        store: &ParameterStore,
        theta: &[S],
    ) -> Result<Instance<S>, GraphError> {
        self.instantiate_cached(store, theta, &mut HeadCache::default())
    }

    pub fn instantiate_cached<S: Scalar>(
        &self,
        store: &ParameterStore,
        theta: &[S],
        cache: &mut HeadCache<S>,
    ) -> Result<Instance<S>, GraphError> {
        let mut out = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            let z = match &f.measurement {
                Measurement::None => Vec::new(),
                Measurement::Fixed(z) => lift(z),
                Measurement::Affine { slice, raw } => {
                    let p = store.view(theta, *slice);
                    let m = raw.len();
                    if p.len() != m * m + m {
                        return Err(GraphError::SliceShape {
                            name: store.slice(*slice).name.clone(),
                            expected: m * m + m,
                            got: p.len(),
                        });
                    }
                    let raw_s: Vec<S> = lift(raw);
                    (0..m)
                        .map(|i| S::dot(&p[i * m..(i + 1) * m], &raw_s) + p[m * m + i])
                        .collect()
                }
            };
            let dim = f.noise.dim();
            let log_sqrt_prec: Vec<S> = match &f.noise {
                NoiseModel::Fixed(sp) => sp.iter().map(|&s| S::constant(s.ln())).collect(),
                NoiseModel::Constant { slice, .. } => {
                    broadcast(store.view(theta, *slice), dim, &store.slice(*slice).name)?
                }
                NoiseModel::Heteroscedastic { head, feature, .. } => {
                    let key = (head.key(), feature.to_bits());
                    let o = match cache.map.get(&key) {
                        Some(o) => o.clone(),
                        None => {
                            let o = head.forward(store, theta, *feature)?;
                            cache.map.insert(key, o.clone());
                            o
                        }
                    };
                    broadcast(&o, dim, head.name())?
                }
            };
            let sqrt_prec = match &f.noise {
                NoiseModel::Fixed(sp) => lift(sp),
                _ => log_sqrt_prec.iter().map(|l| l.exp()).collect(),
            };
            out.push(FactorParams {
                z,
                log_sqrt_prec,
                sqrt_prec,
            });
        }
        Ok(Instance { factors: out })
    }

    fn connected<'a, S>(&self, f: &Factor, x: &'a VariableAssignment<S>) -> Vec<&'a [S]> {
        f.vars.iter().map(|&v| x[v].as_slice()).collect()
    }

    /// Unwhitened residual of factor `i`.
    pub fn residual<S: Scalar>(
        &self,
        i: usize,
        x: &VariableAssignment<S>,
        inst: &Instance<S>,
    ) -> Vec<S> {
        let f = &self.factors[i];
        f.kind.residual(&self.connected(f, x), &inst.factors[i].z)
    }

    /// Stacked `Σ^{-1/2} r_i(X)` over all factors.
    pub fn whitened_residuals<S: Scalar>(
        &self,
        x: &VariableAssignment<S>,
        inst: &Instance<S>,
    ) -> Result<Vec<S>, GraphError> {
        self.check_assignment(x)?;
        let mut out = Vec::with_capacity(self.residual_dim());
        for (i, f) in self.factors.iter().enumerate() {
            let r = self.residual(i, x, inst);
            let sp = &inst.factors[i].sqrt_prec;
            for (&a, &b) in r.iter().zip(sp) {
                let w = a * b;
                if !w.value().is_finite() {
                    return Err(GraphError::NonFinite {
                        factor: i,
                        kind: f.kind.name(),
                    });
                }
                out.push(w);
            }
        }
        Ok(out)
    }

    /// `½‖whitened residuals‖²`.
    pub fn map_cost<S: Scalar>(
        &self,
        x: &VariableAssignment<S>,
        inst: &Instance<S>,
    ) -> Result<S, GraphError> {
        let r = self.whitened_residuals(x, inst)?;
        Ok(S::dot(&r, &r) * 0.5)
    }

    /// Jacobian of the whitened residuals with respect to right-perturbations
    /// of each connected variable, evaluated at zero perturbation.
    pub fn linearize<S: Scalar>(
        &self,
        x: &VariableAssignment<S>,
        inst: &Instance<S>,
    ) -> Result<BlockSparseJacobian<S>, GraphError> {
        self.check_assignment(x)?;
        let mut rows = Vec::with_capacity(self.factors.len());
        for (i, f) in self.factors.iter().enumerate() {
            rows.push(self.linearize_factor(i, &self.connected(f, x), &inst.factors[i])?);
        }
        Ok(BlockSparseJacobian {
            rows,
            tangent_dims: self.tangent_dims(),
        })
    }

    /// Whitened residual and Jacobian blocks of factor `i` at the connected
    /// values `xs`.
    pub fn linearize_factor<S: Scalar>(
        &self,
        i: usize,
        xs: &[&[S]],
        params: &FactorParams<S>,
    ) -> Result<JacobianRow<S>, GraphError> {
        let f = &self.factors[i];
        let z: Vec<Dual<S>> = params.z.iter().map(|&v| Dual::lift(v)).collect();
        let lifted: Vec<Vec<Dual<S>>> = xs
            .iter()
            .map(|x| x.iter().map(|&a| Dual::lift(a)).collect())
            .collect();
        let mut residual = Vec::new();
        let mut blocks = Vec::with_capacity(f.vars.len());
        for (slot, &v) in f.vars.iter().enumerate() {
            let kind = self.variables[v];
            let d = kind.tangent_dim();
            debug_assert!(d <= MAX_TANGENT);
            let delta: Vec<Dual<S>> = (0..d).map(|k| Dual::variable(S::zero(), k)).collect();
            let perturbed = kind.oplus(&lifted[slot], &delta)?;
            let args: Vec<&[Dual<S>]> = (0..f.vars.len())
                .map(|s| {
                    if s == slot {
                        perturbed.as_slice()
                    } else {
                        lifted[s].as_slice()
                    }
                })
                .collect();
            let r = f.kind.residual(&args, &z);
            if slot == 0 {
                residual = r
                    .iter()
                    .zip(&params.sqrt_prec)
                    .map(|(a, &s)| a.re * s)
                    .collect();
                if residual.iter().any(|w: &S| !w.value().is_finite()) {
                    return Err(GraphError::NonFinite {
                        factor: i,
                        kind: f.kind.name(),
                    });
                }
            }
            let mut block = Vec::with_capacity(r.len() * d);
            for (row, &s) in r.iter().zip(&params.sqrt_prec) {
                block.extend(row.eps[..d].iter().map(|&e| e * s));
            }
            blocks.push((v, block));
        }
        Ok(JacobianRow {
            factor: i,
            residual,
            blocks,
        })
    }

    /// `X ⊕ Δ` with `Δ` stacked in variable order.
    pub fn retract<S: Scalar>(
        &self,
        x: &VariableAssignment<S>,
        delta: &[S],
    ) -> Result<VariableAssignment<S>, GraphError> {
        self.check_assignment(x)?;
        let mut off = 0;
        let mut out = Vec::with_capacity(x.len());
        for (k, v) in self.variables.iter().zip(x) {
            let d = k.tangent_dim();
            out.push(k.oplus(v, &delta[off..off + d])?);
            off += d;
        }
        Ok(out)
    }

    /// One line per factor: type, variable ids, residual dimension.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {} variables, {} factors",
            self.variables.len(),
            self.factors.len()
        );
        for f in &self.factors {
            let ids: Vec<String> = f.vars.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "{} {} {}",
                f.kind.name(),
                ids.join(","),
                f.kind.residual_dim()
            );
        }
        s
    }
}

fn broadcast<S: Scalar>(v: &[S], dim: usize, name: &str) -> Result<Vec<S>, GraphError> {
    match v.len() {
        1 => Ok(vec![v[0]; dim]),
        n if n == dim => Ok(v.to_vec()),
        n => Err(GraphError::SliceShape {
            name: name.to_string(),
            expected: dim,
            got: n,
        }),
    }
}
