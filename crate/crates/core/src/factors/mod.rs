//! Factor residuals, virtual-sensor heads and task model construction.

mod mlp;
mod model;

pub use mlp::Mlp;
pub use model::{Model, ModelSpec, NoiseKind, Payload, Task, DISK_FULL_PIXELS};

use std::sync::Arc;

use crate::diff::{lift, Scalar};
use crate::lie::{ManifoldKind, Se2, Twist2};

/// Spring constant pulling the disk toward the image centre.
pub const DISK_SPRING: f64 = 0.05;
/// Quadratic drag coefficient of the disk.
pub const DISK_DRAG: f64 = 0.0075;
/// Square-root precision of the velocity entries of the SE(2) prior.
pub const PRIOR_VELOCITY_SQRT_PREC: f64 = 1e7;
/// Square-root precision of the pose entries of the SE(2) prior.
pub const PRIOR_POSE_SQRT_PREC: f64 = 1.0;

pub const DISK_STATE: ManifoldKind = ManifoldKind::Euclidean(4);
/// Pose plus forward and angular velocity.
pub const SE2_STATE: ManifoldKind = ManifoldKind::Se2Ext(2);

/// Closed set of residual functions.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// `z − x`.
    LinearPrior { dim: usize },
    /// `A·x_t − x_{t+1}` with `A` row-major `dim × dim`.
    LinearTransition { dim: usize, a: Arc<[f64]> },
    /// `z − C·x` with `C` row-major `meas_dim × state_dim`.
    LinearObservation {
        state_dim: usize,
        meas_dim: usize,
        c: Arc<[f64]>,
    },
    /// `f(x_t) − x_{t+1}` for the spring/drag disk dynamics.
    DiskTransition { drag: bool },
    /// `z − p`.
    DiskVision,
    /// `[log(f(x_t)⁻¹ T_{t+1}); v_{t+1} − v_t; ω_{t+1} − ω_t]`.
    Se2Transition { dt: f64 },
    /// `z − (v, ω)`.
    Se2Velocity,
    /// `[log(T_gt⁻¹ T_0); v_gt − v_0; ω_gt − ω_0]`, anchor passed as `z`.
    Se2Prior,
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::LinearPrior { .. } => "LinearPrior",
            FactorKind::LinearTransition { .. } => "LinearTransition",
            FactorKind::LinearObservation { .. } => "LinearObservation",
            FactorKind::DiskTransition { .. } => "DiskTransition",
            FactorKind::DiskVision => "DiskVision",
            FactorKind::Se2Transition { .. } => "Se2Transition",
            FactorKind::Se2Velocity => "Se2Velocity",
            FactorKind::Se2Prior => "Se2Prior",
        }
    }

    pub fn variable_kinds(&self) -> Vec<ManifoldKind> {
        match self {
            FactorKind::LinearPrior { dim } => vec![ManifoldKind::Euclidean(*dim)],
            FactorKind::LinearTransition { dim, .. } => {
                vec![ManifoldKind::Euclidean(*dim); 2]
            }
            FactorKind::LinearObservation { state_dim, .. } => {
                vec![ManifoldKind::Euclidean(*state_dim)]
            }
            FactorKind::DiskTransition { .. } => vec![DISK_STATE; 2],
            FactorKind::DiskVision => vec![DISK_STATE],
            FactorKind::Se2Transition { .. } => vec![SE2_STATE; 2],
            FactorKind::Se2Velocity | FactorKind::Se2Prior => vec![SE2_STATE],
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            FactorKind::LinearPrior { dim } | FactorKind::LinearTransition { dim, .. } => *dim,
            FactorKind::LinearObservation { meas_dim, .. } => *meas_dim,
            FactorKind::DiskTransition { .. } => 4,
            FactorKind::DiskVision | FactorKind::Se2Velocity => 2,
            FactorKind::Se2Transition { .. } | FactorKind::Se2Prior => 5,
        }
    }

    /// Whether the factor links consecutive states.
    pub fn is_transition(&self) -> bool {
        matches!(
            self,
            FactorKind::LinearTransition { .. }
                | FactorKind::DiskTransition { .. }
                | FactorKind::Se2Transition { .. }
        )
    }

    /// Whether the factor anchors the first state (filters skip these).
    pub fn is_prior(&self) -> bool {
        matches!(self, FactorKind::LinearPrior { .. } | FactorKind::Se2Prior)
    }

    /// Unwhitened residual. `xs` holds the connected variable values in order.
    pub fn residual<T: Scalar>(&self, xs: &[&[T]], z: &[T]) -> Vec<T> {
        match self {
            FactorKind::LinearPrior { .. } => z.iter().zip(xs[0]).map(|(&a, &b)| a - b).collect(),
            FactorKind::LinearTransition { .. }
            | FactorKind::DiskTransition { .. }
            | FactorKind::Se2Transition { .. } => {
                let pred = self.predict(xs[0]).expect("transition factor");
                match self {
                    FactorKind::Se2Transition { .. } => {
                        let d = pose_log(&pred, xs[1]);
                        vec![d[0], d[1], d[2], xs[1][4] - pred[4], xs[1][5] - pred[5]]
                    }
                    _ => pred.iter().zip(xs[1]).map(|(&a, &b)| a - b).collect(),
                }
            }
            FactorKind::LinearObservation {
                state_dim,
                meas_dim,
                c,
            } => {
                let c: Vec<T> = lift(c);
                (0..*meas_dim)
                    .map(|i| z[i] - T::dot(&c[i * state_dim..(i + 1) * state_dim], xs[0]))
                    .collect()
            }
            FactorKind::DiskVision => vec![z[0] - xs[0][0], z[1] - xs[0][1]],
            FactorKind::Se2Velocity => vec![z[0] - xs[0][4], z[1] - xs[0][5]],
            FactorKind::Se2Prior => {
                let d = pose_log(z, xs[0]);
                vec![d[0], d[1], d[2], z[4] - xs[0][4], z[5] - xs[0][5]]
            }
        }
    }

    /// Deterministic dynamics `f(x)` of a transition factor.
    pub fn predict<T: Scalar>(&self, x: &[T]) -> Option<Vec<T>> {
        match self {
            FactorKind::LinearTransition { dim, a } => {
                let a: Vec<T> = lift(a);
                Some(
                    (0..*dim)
                        .map(|i| T::dot(&a[i * dim..(i + 1) * dim], x))
                        .collect(),
                )
            }
            FactorKind::DiskTransition { drag } => {
                let mut out = Vec::with_capacity(4);
                out.push(x[0] + x[2]);
                out.push(x[1] + x[3]);
                for k in 0..2 {
                    let v = x[2 + k];
                    let mut nv = v - x[k] * DISK_SPRING;
                    if *drag {
                        nv = nv - v * v.abs() * DISK_DRAG;
                    }
                    out.push(nv);
                }
                Some(out)
            }
            FactorKind::Se2Transition { dt } => {
                let (v, w) = (x[4], x[5]);
                let step = Twist2::new(v * *dt, T::zero(), w * *dt);
                let pose = Se2::from_slice(&x[..4]).compose(&Se2::exp(&step));
                let mut out = pose.to_array().to_vec();
                out.extend([v, w]);
                Some(out)
            }
            _ => None,
        }
    }
}

/// `log(a⁻¹ b)` of the pose parts of two SE(2) states.
fn pose_log<T: Scalar>(a: &[T], b: &[T]) -> [T; 3] {
    Se2::from_slice(&a[..4])
        .between(&Se2::from_slice(&b[..4]))
        .log()
        .to_array()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_dynamics_examples() {
        let k = FactorKind::DiskTransition { drag: true };
        let f = k.predict(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(f[0], 1.0);
        assert!((f[2] - 0.9925).abs() < 1e-15);
        let f = k.predict(&[10.0, 0.0, -2.0, 0.0]).unwrap();
        assert!((f[2] - (-2.47)).abs() < 1e-12);
    }

    #[test]
    fn disk_transition_zero_on_exact_successor() {
        let k = FactorKind::DiskTransition { drag: true };
        let x0 = [3.0, -4.0, 1.5, 0.2];
        let x1 = k.predict(&x0).unwrap();
        assert!(k.residual(&[&x0, &x1], &[]).iter().all(|r| *r == 0.0));
    }

    #[test]
    fn straight_line_integration() {
        let k = FactorKind::Se2Transition { dt: 1.0 };
        let x0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let x1 = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let r = k.residual(&[&x0, &x1], &[]);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn velocity_residual() {
        let x = [1.0, 0.0, 0.0, 0.0, 1.5, 0.1];
        let r = FactorKind::Se2Velocity.residual(&[&x], &[2.0, 0.1]);
        assert_eq!(r, vec![0.5, 0.0]);
    }

    #[test]
    fn prior_pose_perturbation_leaves_velocity_rows_zero() {
        let anchor = [1.0, 0.0, 2.0, 3.0, 0.7, -0.1];
        let pose = Se2::new(0.2, 2.5, 3.1).to_array();
        let x = [pose[0], pose[1], pose[2], pose[3], 0.7, -0.1];
        let r = FactorKind::Se2Prior.residual(&[&x], &anchor);
        assert_eq!(&r[3..], &[0.0, 0.0]);
        assert!(r[..3].iter().any(|v| v.abs() > 0.1));
    }
}
