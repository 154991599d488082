use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{DiffError, Scalar};

/// Operation that produced a tape node. Kept for diagnostics only; the
/// backward pass works from the stored local partials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Relu,
    Abs,
    Atan2,
    MulAdd,
    Dot,
    Sum,
    LinearSolve,
    Custom,
}

type Backward = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct CustomOp {
    inputs: Vec<u32>,
    first_output: u32,
    n_outputs: u32,
    backward: Backward,
}

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    prims: Vec<Primitive>,
    // edges of node i live in edge_src/edge_w[edge_end[i-1]..edge_end[i]]
    edge_end: Vec<u32>,
    edge_src: Vec<u32>,
    edge_w: Vec<f64>,
    first_non_finite: Option<(usize, Primitive)>,
}

/// Append-only record of scalar operations.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Nodes>,
    custom: RefCell<Vec<CustomOp>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Nodes::default()),
            custom: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.borrow().edge_src.len()
    }

    /// A differentiable leaf.
    pub fn input<'t>(&'t self, value: f64) -> Var<'t> {
        let idx = self.push(Primitive::Input, value, &[]);
        Var::node(self, idx, value)
    }

    pub fn inputs<'t>(&'t self, values: &[f64]) -> Vec<Var<'t>> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    /// First node whose value was NaN or infinite, if any.
    pub fn first_non_finite(&self) -> Option<(usize, Primitive)> {
        self.nodes.borrow().first_non_finite
    }

    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.first_non_finite() {
            Some((node, primitive)) => Err(DiffError::NonFinite { primitive, node }),
            None => Ok(()),
        }
    }

    fn push(&self, prim: Primitive, value: f64, edges: &[(u32, f64)]) -> u32 {
        let mut n = self.nodes.borrow_mut();
        let idx = n.values.len();
        if !value.is_finite() && n.first_non_finite.is_none() {
            n.first_non_finite = Some((idx, prim));
        }
        n.values.push(value);
        n.prims.push(prim);
        for &(src, w) in edges {
            if w != 0.0 {
                n.edge_src.push(src);
                n.edge_w.push(w);
            }
        }
        let end = n.edge_src.len() as u32;
        n.edge_end.push(end);
        idx as u32
    }

    fn push_var<'t>(&'t self, prim: Primitive, value: f64, edges: &[(u32, f64)]) -> Var<'t> {
        let idx = self.push(prim, value, edges);
        Var::node(self, idx, value)
    }

    /// Records an operation with many outputs whose adjoint is supplied as a
    /// closure. `backward` receives the output adjoints and returns one
    /// contribution per entry of `inputs` (constants included, they are
    /// dropped).
    pub fn custom_op<'t>(
        &'t self,
        prim: Primitive,
        inputs: &[Var<'t>],
        outputs: &[f64],
        backward: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Vec<Var<'t>> {
        let first = self.len() as u32;
        let out: Vec<Var<'t>> = outputs
            .iter()
            .map(|&v| self.push_var(prim, v, &[]))
            .collect();
        let input_idx: Vec<u32> = inputs
            .iter()
            .map(|v| v.index().map_or(u32::MAX, |i| i as u32))
            .collect();
        self.custom.borrow_mut().push(CustomOp {
            inputs: input_idx,
            first_output: first,
            n_outputs: outputs.len() as u32,
            backward: Box::new(backward),
        });
        out
    }

    /// Adjoints of every node with respect to `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        self.check_finite()?;
        let n = self.nodes.borrow();
        let mut adj = vec![0.0; n.values.len()];
        let Some(root) = loss.index() else {
            return Ok(Gradients { adj });
        };
        if !std::ptr::eq(loss.tape.unwrap(), self) {
            return Err(DiffError::ForeignTape);
        }
        adj[root] = 1.0;
        let custom = self.custom.borrow();
        let mut next_custom = custom.len();
        for i in (0..=root).rev() {
            while next_custom > 0 && custom[next_custom - 1].first_output as usize > i {
                next_custom -= 1;
            }
            if next_custom > 0 && custom[next_custom - 1].first_output as usize == i {
                let op = &custom[next_custom - 1];
                let lo = op.first_output as usize;
                let out_adj = &adj[lo..lo + op.n_outputs as usize];
                if out_adj.iter().any(|&a| a != 0.0) {
                    let contrib = (op.backward)(out_adj);
                    for (&src, c) in op.inputs.iter().zip(contrib) {
                        if src != u32::MAX {
                            adj[src as usize] += c;
                        }
                    }
                }
                next_custom -= 1;
            }
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let lo = if i == 0 {
                0
            } else {
                n.edge_end[i - 1] as usize
            };
            let hi = n.edge_end[i] as usize;
            for e in lo..hi {
                adj[n.edge_src[e] as usize] += a * n.edge_w[e];
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `v`; zero for constants and nodes the loss does not reach.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        v.index().map_or(0.0, |i| self.adj[i])
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(v)).collect()
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
///
/// Operations between constants fold eagerly and never touch the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(i) => write!(f, "Var#{i}({})", self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    fn node(tape: &'t Tape, idx: u32, val: f64) -> Self {
        Var {
            tape: Some(tape),
            idx,
            val,
        }
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    /// Tape this variable was recorded on, `None` for constants.
    pub fn tape(&self) -> Option<&'t Tape> {
        self.tape
    }

    fn unary(self, prim: Primitive, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => t.push_var(prim, val, &[(self.idx, d)]),
        }
    }

    fn binary(a: Self, b: Self, prim: Primitive, val: f64, da: f64, db: f64) -> Self {
        match (a.tape, b.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => t.push_var(prim, val, &[(a.idx, da)]),
            (None, Some(t)) => t.push_var(prim, val, &[(b.idx, db)]),
            (Some(t), Some(_)) => t.push_var(prim, val, &[(a.idx, da), (b.idx, db)]),
        }
    }

    fn is_zero_const(&self) -> bool {
        self.tape.is_none() && self.val == 0.0
    }

    fn is_one_const(&self) -> bool {
        self.tape.is_none() && self.val == 1.0
    }

    /// Linear combination `Σ wᵢ xᵢ + c` with `f64` weights as one node.
    pub fn linear_combination(terms: &[(Var<'t>, f64)], c: f64) -> Var<'t> {
        let mut val = c;
        let mut tape = None;
        let mut edges = Vec::with_capacity(terms.len());
        for &(x, w) in terms {
            val += w * x.val;
            if let Some(t) = x.tape {
                tape = Some(t);
                edges.push((x.idx, w));
            }
        }
        match tape {
            None => Var::constant(val),
            Some(t) => t.push_var(Primitive::Sum, val, &edges),
        }
    }
}

impl<'t> Scalar for Var<'t> {
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }

    #[inline]
    fn constant(x: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val: x,
        }
    }

    fn sin(self) -> Self {
        self.unary(Primitive::Sin, self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(Primitive::Cos, self.val.cos(), -self.val.sin())
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(Primitive::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(Primitive::Ln, self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(Primitive::Sqrt, s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(Primitive::Tanh, t, 1.0 - t * t)
    }

    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary(Primitive::Relu, self.val, 1.0)
        } else {
            Var::constant(0.0)
        }
    }

    fn abs(self) -> Self {
        let s = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(Primitive::Abs, self.val.abs(), s)
    }

    fn atan2(self, x: Self) -> Self {
        let (y, xv) = (self.val, x.val);
        let r2 = xv * xv + y * y;
        Var::binary(self, x, Primitive::Atan2, y.atan2(xv), xv / r2, -y / r2)
    }

    fn mul_add2(a: Self, b: Self, c: Self, d: Self) -> Self {
        let val = a.val * b.val + c.val * d.val;
        let mut tape = None;
        let mut edges = [(0u32, 0.0f64); 4];
        let mut k = 0;
        for (x, w) in [(a, b.val), (b, a.val), (c, d.val), (d, c.val)] {
            if let Some(t) = x.tape {
                if w != 0.0 {
                    tape = Some(t);
                    edges[k] = (x.idx, w);
                    k += 1;
                }
            }
        }
        match tape {
            None => Var::constant(val),
            Some(t) => t.push_var(Primitive::MulAdd, val, &edges[..k]),
        }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut val = 0.0;
        let mut tape = None;
        let mut edges = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            val += x.val * y.val;
            if let Some(t) = x.tape {
                tape = Some(t);
                edges.push((x.idx, y.val));
            }
            if let Some(t) = y.tape {
                tape = Some(t);
                edges.push((y.idx, x.val));
            }
        }
        match tape {
            None => Var::constant(val),
            Some(t) => t.push_var(Primitive::Dot, val, &edges),
        }
    }

    fn sum(xs: &[Self]) -> Self {
        let terms: Vec<(Var<'t>, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        Var::linear_combination(&terms, 0.0)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        if rhs.is_zero_const() {
            return self;
        }
        if self.is_zero_const() {
            return rhs;
        }
        Var::binary(self, rhs, Primitive::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        if rhs.is_zero_const() {
            return self;
        }
        Var::binary(self, rhs, Primitive::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        if self.is_zero_const() || rhs.is_zero_const() {
            return Var::constant(0.0);
        }
        if self.is_one_const() {
            return rhs;
        }
        if rhs.is_one_const() {
            return self;
        }
        Var::binary(
            self,
            rhs,
            Primitive::Mul,
            self.val * rhs.val,
            rhs.val,
            self.val,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if self.is_zero_const() && rhs.val != 0.0 {
            return Var::constant(0.0);
        }
        let q = self.val / rhs.val;
        Var::binary(self, rhs, Primitive::Div, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Primitive::Neg, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return self;
        }
        self.unary(Primitive::Add, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return self;
        }
        self.unary(Primitive::Sub, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return Var::constant(0.0);
        }
        if rhs == 1.0 {
            return self;
        }
        self.unary(Primitive::Mul, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        if rhs == 1.0 {
            return self;
        }
        self.unary(Primitive::Div, self.val / rhs, 1.0 / rhs)
    }
}
