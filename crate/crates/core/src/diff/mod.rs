//! Reverse-mode automatic differentiation.
//!
//! Numeric code in this crate is written once against the [`Scalar`] trait and
//! instantiated with three number types:
//!
//! * `f64` for plain evaluation (simulation, LM inference, metrics),
//! * [`Var`] to record a computation on a [`Tape`] and backpropagate through it,
//! * [`Dual`] for forward-mode tangents, used to build factor Jacobians.
//!
//! `Dual<Var>` gives Jacobian blocks that are themselves recorded on the tape,
//! which is what lets gradients flow through a linearization step.

mod dense;
mod dual;
mod tape;

pub use dense::{cholesky_solve_dense, identity, matmul, transpose, DenseError};
pub use dual::{Dual, MAX_TANGENT};
pub use tape::{Gradients, Primitive, Tape, Var};

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by primitive {primitive:?} at node {node}")]
    NonFinite { primitive: Primitive, node: usize },
    #[error("variable belongs to a different tape")]
    ForeignTape,
}

/// Number type the estimation code is generic over.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Primal value.
    fn value(&self) -> f64;
    fn constant(x: f64) -> Self;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// `max(x, 0)`; the subgradient at 0 is 0.
    fn relu(self) -> Self;
    fn abs(self) -> Self;
    /// Four-quadrant arctangent of `self / x`.
    fn atan2(self, x: Self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn one() -> Self {
        Self::constant(1.0)
    }

    fn powi2(self) -> Self {
        self * self
    }

    /// `a * b + c * d`, recorded as a single node where that matters.
    fn mul_add2(a: Self, b: Self, c: Self, d: Self) -> Self {
        a * b + c * d
    }

    /// Inner product; callers guarantee equal lengths.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(Self::zero(), |acc, (&x, &y)| acc + x * y)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::zero(), |acc, &x| acc + x)
    }
}

impl Scalar for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn constant(x: f64) -> Self {
        x
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    #[inline]
    fn mul_add2(a: Self, b: Self, c: Self, d: Self) -> Self {
        a * b + c * d
    }
}

/// Lift a slice of `f64` into any scalar type as constants.
pub fn lift<S: Scalar>(xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::constant(x)).collect()
}

/// Primal values of a scalar slice.
pub fn values<S: Scalar>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(Scalar::value).collect()
}

/// `sin(x) / x`, switching to a second-order series below `1e-7`.
pub fn sinc<S: Scalar>(x: S) -> S {
    if x.value().abs() < SMALL_ANGLE {
        S::one() - x * x * (1.0 / 6.0)
    } else {
        x.sin() / x
    }
}

/// `(1 - cos x) / x`, switching to a series below `1e-7`.
pub fn versinc<S: Scalar>(x: S) -> S {
    if x.value().abs() < SMALL_ANGLE {
        x * 0.5 - x * x * x * (1.0 / 24.0)
    } else {
        let h = (x * 0.5).sin();
        h * h * 2.0 / x
    }
}

pub const SMALL_ANGLE: f64 = 1e-7;
