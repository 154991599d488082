use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Largest tangent space a single [`Dual`] can carry.
pub const MAX_TANGENT: usize = 8;

/// Forward-mode dual number over any [`Scalar`].
///
/// With `S = Var` the tangent components are tape nodes, so a Jacobian built
/// from duals can itself be differentiated in reverse mode.
#[derive(Debug, Clone, Copy)]
pub struct Dual<S> {
    pub re: S,
    pub eps: [S; MAX_TANGENT],
}

impl<S: Scalar> Dual<S> {
    /// A dual seeded along tangent direction `k`.
    pub fn variable(re: S, k: usize) -> Self {
        let mut eps = [S::zero(); MAX_TANGENT];
        eps[k] = S::one();
        Dual { re, eps }
    }

    pub fn lift(re: S) -> Self {
        Dual {
            re,
            eps: [S::zero(); MAX_TANGENT],
        }
    }

    #[inline]
    fn chain(self, re: S, d: S) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = d * *e;
        }
        Dual { re, eps }
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn value(&self) -> f64 {
        self.re.value()
    }

    fn constant(x: f64) -> Self {
        Dual::lift(S::constant(x))
    }

    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }

    fn ln(self) -> Self {
        self.chain(self.re.ln(), S::one() / self.re)
    }

    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, S::constant(0.5) / s)
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, S::one() - t * t)
    }

    fn relu(self) -> Self {
        if self.re.value() > 0.0 {
            self
        } else {
            Dual::lift(S::zero())
        }
    }

    fn abs(self) -> Self {
        let v = self.re.value();
        let s = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.re.abs(), S::constant(s))
    }

    fn atan2(self, x: Self) -> Self {
        let r2 = x.re * x.re + self.re * self.re;
        let a = x.re / r2;
        let b = -self.re / r2;
        let mut eps = self.eps;
        for (k, e) in eps.iter_mut().enumerate() {
            *e = S::mul_add2(a, self.eps[k], b, x.eps[k]);
        }
        Dual {
            re: self.re.atan2(x.re),
            eps,
        }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps) {
            *e = *e + r;
        }
        Dual {
            re: self.re + rhs.re,
            eps,
        }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps) {
            *e = *e - r;
        }
        Dual {
            re: self.re - rhs.re,
            eps,
        }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (k, e) in eps.iter_mut().enumerate() {
            *e = S::mul_add2(self.re, rhs.eps[k], rhs.re, self.eps[k]);
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = S::one() / rhs.re;
        let q = self.re * inv;
        let mq = -(q * inv);
        let mut eps = self.eps;
        for (k, e) in eps.iter_mut().enumerate() {
            *e = S::mul_add2(self.eps[k], inv, mq, rhs.eps[k]);
        }
        Dual { re: q, eps }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = -*e;
        }
        Dual { re: -self.re, eps }
    }
}

impl<S: Scalar> Add<f64> for Dual<S> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        Dual {
            re: self.re + rhs,
            eps: self.eps,
        }
    }
}

impl<S: Scalar> Sub<f64> for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        Dual {
            re: self.re - rhs,
            eps: self.eps,
        }
    }
}

impl<S: Scalar> Mul<f64> for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * rhs;
        }
        Dual {
            re: self.re * rhs,
            eps,
        }
    }
}

impl<S: Scalar> Div<f64> for Dual<S> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}
