//! SO(2) / SE(2) types and the generalized `⊕` / `⊖` operators.
//!
//! All types are generic over [`Scalar`] so the same code runs on plain
//! floats, tape variables and dual numbers.

use thiserror::Error;

use crate::diff::{sinc, versinc, Scalar, SMALL_ANGLE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("tangent dimension {got} does not match manifold {kind:?} (expected {expected})")]
    TangentDim {
        kind: ManifoldKind,
        expected: usize,
        got: usize,
    },
    #[error("value dimension {got} does not match manifold {kind:?} (expected {expected})")]
    ValueDim {
        kind: ManifoldKind,
        expected: usize,
        got: usize,
    },
}

/// Planar rotation stored as a unit complex number.
#[derive(Debug, Clone, Copy)]
pub struct So2<S> {
    pub cos: S,
    pub sin: S,
}

impl<S: Scalar> So2<S> {
    pub fn identity() -> Self {
        So2 {
            cos: S::one(),
            sin: S::zero(),
        }
    }

    pub fn from_angle(theta: S) -> Self {
        So2 {
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Projects `(c, s)` back onto the unit circle.
    pub fn normalized(cos: S, sin: S) -> Self {
        let n2 = (cos * cos + sin * sin).value();
        if (n2 - 1.0).abs() < 1e-15 {
            return So2 { cos, sin };
        }
        let inv = S::one() / (cos * cos + sin * sin).sqrt();
        So2 {
            cos: cos * inv,
            sin: sin * inv,
        }
    }

    pub fn angle(&self) -> S {
        self.sin.atan2(self.cos)
    }

    pub fn compose(&self, other: &Self) -> Self {
        So2::normalized(
            S::mul_add2(self.cos, other.cos, -self.sin, other.sin),
            S::mul_add2(self.sin, other.cos, self.cos, other.sin),
        )
    }

    pub fn inverse(&self) -> Self {
        So2 {
            cos: self.cos,
            sin: -self.sin,
        }
    }

    pub fn rotate(&self, v: [S; 2]) -> [S; 2] {
        [
            S::mul_add2(self.cos, v[0], -self.sin, v[1]),
            S::mul_add2(self.sin, v[0], self.cos, v[1]),
        ]
    }
}

/// Tangent vector of SE(2), ordered `(vx, vy, ω)`.
#[derive(Debug, Clone, Copy)]
pub struct Twist2<S> {
    pub vx: S,
    pub vy: S,
    pub omega: S,
}

impl<S: Scalar> Twist2<S> {
    pub fn new(vx: S, vy: S, omega: S) -> Self {
        Twist2 { vx, vy, omega }
    }

    pub fn from_slice(v: &[S]) -> Self {
        Twist2::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [S; 3] {
        [self.vx, self.vy, self.omega]
    }
}

/// Rigid planar transform.
#[derive(Debug, Clone, Copy)]
pub struct Se2<S> {
    pub rotation: So2<S>,
    pub translation: [S; 2],
}

impl<S: Scalar> Se2<S> {
    pub fn identity() -> Self {
        Se2 {
            rotation: So2::identity(),
            translation: [S::zero(), S::zero()],
        }
    }

    pub fn new(theta: S, x: S, y: S) -> Self {
        Se2 {
            rotation: So2::from_angle(theta),
            translation: [x, y],
        }
    }

    /// Reads `[cos, sin, tx, ty]`.
    pub fn from_slice(v: &[S]) -> Self {
        Se2 {
            rotation: So2::normalized(v[0], v[1]),
            translation: [v[2], v[3]],
        }
    }

    /// Writes `[cos, sin, tx, ty]`.
    pub fn to_array(&self) -> [S; 4] {
        [
            self.rotation.cos,
            self.rotation.sin,
            self.translation[0],
            self.translation[1],
        ]
    }

    pub fn angle(&self) -> S {
        self.rotation.angle()
    }

    pub fn compose(&self, other: &Self) -> Self {
        let t = self.rotation.rotate(other.translation);
        Se2 {
            rotation: self.rotation.compose(&other.rotation),
            translation: [t[0] + self.translation[0], t[1] + self.translation[1]],
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        let t = r.rotate(self.translation);
        Se2 {
            rotation: r,
            translation: [-t[0], -t[1]],
        }
    }

    /// `self⁻¹ · other` without forming the inverse separately.
    pub fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }

    pub fn exp(t: &Twist2<S>) -> Self {
        let w = t.omega;
        let a = sinc(w);
        let b = versinc(w);
        // V = [[a, -b], [b, a]]
        let x = S::mul_add2(a, t.vx, -b, t.vy);
        let y = S::mul_add2(b, t.vx, a, t.vy);
        Se2 {
            rotation: So2 {
                cos: w.cos(),
                sin: w.sin(),
            },
            translation: [x, y],
        }
    }

    /// Principal logarithm; `ω ∈ (−π, π]`.
    pub fn log(&self) -> Twist2<S> {
        let c = self.rotation.cos;
        let s = self.rotation.sin;
        let w = s.atan2(c);
        let half = w * 0.5;
        // (ω/2)·cot(ω/2), written to stay finite at both ends of the range
        let halfcot = if w.value().abs() < SMALL_ANGLE {
            S::one() - w * w * (1.0 / 12.0)
        } else if c.value() > 0.0 {
            half * (c + 1.0) / s
        } else {
            half * s / (-c + 1.0)
        };
        let [tx, ty] = self.translation;
        Twist2 {
            vx: S::mul_add2(halfcot, tx, half, ty),
            vy: S::mul_add2(-half, tx, halfcot, ty),
            omega: w,
        }
    }

    pub fn transform_point(&self, p: [S; 2]) -> [S; 2] {
        let r = self.rotation.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1]]
    }
}

/// Manifold a variable lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManifoldKind {
    Euclidean(usize),
    Se2,
    /// `SE(2) × R^k`, stored as `[cos, sin, tx, ty, e₀ … e_{k−1}]`.
    Se2Ext(usize),
}

impl ManifoldKind {
    /// Length of the stored value.
    pub fn value_dim(&self) -> usize {
        match *self {
            ManifoldKind::Euclidean(n) => n,
            ManifoldKind::Se2 => 4,
            ManifoldKind::Se2Ext(k) => 4 + k,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match *self {
            ManifoldKind::Euclidean(n) => n,
            ManifoldKind::Se2 => 3,
            ManifoldKind::Se2Ext(k) => 3 + k,
        }
    }

    pub fn identity<S: Scalar>(&self) -> Vec<S> {
        let mut v = vec![S::zero(); self.value_dim()];
        if !matches!(self, ManifoldKind::Euclidean(_)) {
            v[0] = S::one();
        }
        v
    }

    fn check_value<S>(&self, x: &[S]) -> Result<(), LieError> {
        if x.len() != self.value_dim() {
            return Err(LieError::ValueDim {
                kind: *self,
                expected: self.value_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `x ⊕ δ`; right perturbation `x · exp(δ)` on the group part.
    pub fn oplus<S: Scalar>(&self, x: &[S], delta: &[S]) -> Result<Vec<S>, LieError> {
        self.check_value(x)?;
        if delta.len() != self.tangent_dim() {
            return Err(LieError::TangentDim {
                kind: *self,
                expected: self.tangent_dim(),
                got: delta.len(),
            });
        }
        Ok(match self {
            ManifoldKind::Euclidean(_) => x.iter().zip(delta).map(|(&a, &d)| a + d).collect(),
            ManifoldKind::Se2 | ManifoldKind::Se2Ext(_) => {
                let g = Se2::from_slice(&x[..4]).compose(&Se2::exp(&Twist2::from_slice(delta)));
                let mut out = g.to_array().to_vec();
                out.extend(x[4..].iter().zip(&delta[3..]).map(|(&a, &d)| a + d));
                out
            }
        })
    }

    /// `y ⊖ x`, the tangent vector `δ` with `x ⊕ δ = y`.
    pub fn ominus<S: Scalar>(&self, y: &[S], x: &[S]) -> Result<Vec<S>, LieError> {
        self.check_value(x)?;
        self.check_value(y)?;
        Ok(match self {
            ManifoldKind::Euclidean(_) => y.iter().zip(x).map(|(&a, &b)| a - b).collect(),
            ManifoldKind::Se2 | ManifoldKind::Se2Ext(_) => {
                let d = Se2::from_slice(&x[..4])
                    .between(&Se2::from_slice(&y[..4]))
                    .log();
                let mut out = d.to_array().to_vec();
                out.extend(y[4..].iter().zip(&x[4..]).map(|(&a, &b)| a - b));
                out
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let g = Se2::exp(&Twist2::new(0.0, 0.0, 0.0));
        assert!(close(&g.to_array(), &[1.0, 0.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn pure_rotation_fixes_origin() {
        let g = Se2::exp(&Twist2::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!(close(&g.to_array(), &[0.0, 1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn log_round_trip() {
        let t = Twist2::new(0.3, -0.1, 0.7);
        let back = Se2::exp(&t).log();
        assert!(close(&back.to_array(), &t.to_array(), 1e-12));
    }

    #[test]
    fn log_near_pi_is_finite() {
        let g = Se2::new(std::f64::consts::PI - 1e-6, 0.4, -2.0);
        let t = g.log();
        assert!(t.to_array().iter().all(|v| v.is_finite()));
        let back = Se2::exp(&t);
        assert!(close(&back.to_array(), &g.to_array(), 1e-9));
    }

    #[test]
    fn log_at_exactly_pi() {
        let g = Se2 {
            rotation: So2 {
                cos: -1.0,
                sin: 0.0,
            },
            translation: [1.0, 2.0],
        };
        let t = g.log();
        assert!((t.omega - std::f64::consts::PI).abs() < 1e-15);
        assert!(close(&Se2::exp(&t).to_array(), &g.to_array(), 1e-12));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let below = Se2::exp(&Twist2::new(1.0, 2.0, 0.5e-7));
        let above = Se2::exp(&Twist2::new(1.0, 2.0, 2e-7));
        assert!(close(&below.to_array(), &above.to_array(), 1e-6));
        let t = below.log();
        assert!((t.vx - 1.0).abs() < 1e-12 && (t.vy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_oplus() {
        let k = ManifoldKind::Euclidean(2);
        let y = k.oplus(&[1.0, 2.0], &[0.5, -1.0]).unwrap();
        assert_eq!(y, vec![1.5, 1.0]);
        assert_eq!(k.ominus(&y, &[1.0, 2.0]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn se2_oplus_zero_is_noop() {
        let k = ManifoldKind::Se2;
        let x = Se2::new(0.4, 1.0, -3.0).to_array();
        let y = k.oplus(&x, &[0.0, 0.0, 0.0]).unwrap();
        assert!(close(&x, &y, 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = ManifoldKind::Se2Ext(2);
        let x = k.identity::<f64>();
        assert!(matches!(
            k.oplus(&x, &[0.0; 3]),
            Err(LieError::TangentDim { expected: 5, .. })
        ));
        assert!(k.ominus(&x, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn compose_with_inverse() {
        let a = Se2::new(2.0, -1.0, 0.5);
        let e = a.compose(&a.inverse());
        assert!(close(&e.to_array(), &[1.0, 0.0, 0.0, 0.0], 1e-15));
    }
}
