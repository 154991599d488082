//! Synthetic planar odometry: smooth velocity profiles integrated on SE(2),
//! observed through a velocity sensor whose noise depends on a slowly
//! varying quality signal.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::factors::Payload;
use crate::lie::{Se2, Twist2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdomSimConfig {
    pub length: usize,
    pub dt: f64,
    /// Long-run mean forward speed (m/step).
    pub mean_speed: f64,
    /// Pull of the speed toward its mean per step.
    pub speed_reversion: f64,
    /// Pull of the turn rate toward zero per step.
    pub turn_reversion: f64,
    /// Persistence of the accelerations (AR(1) coefficient).
    pub accel_persistence: f64,
    pub accel_std: f64,
    pub turn_accel_std: f64,
    /// Sensor noise std at quality 1 and quality 0, for `(v, ω)`.
    pub noise_std_clean: [f64; 2],
    pub noise_std_degraded: [f64; 2],
    /// Persistence and innovation std of the quality signal.
    pub quality_persistence: f64,
    pub quality_std: f64,
    /// Quality is reported on this grid.
    pub quality_step: f64,
}

impl Default for OdomSimConfig {
    fn default() -> Self {
        OdomSimConfig {
            length: 100,
            dt: 1.0,
            mean_speed: 1.0,
            speed_reversion: 0.02,
            turn_reversion: 0.05,
            accel_persistence: 0.9,
            accel_std: 0.01,
            turn_accel_std: 0.002,
            noise_std_clean: [0.02, 0.002],
            noise_std_degraded: [0.4, 0.04],
            quality_persistence: 0.9,
            quality_std: 0.15,
            quality_step: 0.01,
        }
    }
}

impl OdomSimConfig {
    /// Sensor noise std for quality `q ∈ [0, 1]`; maximal at `q = 0`.
    pub fn noise_std(&self, q: f64) -> [f64; 2] {
        let q = q.clamp(0.0, 1.0);
        let mut out = [0.0; 2];
        for k in 0..2 {
            // geometric interpolation keeps the log-std linear in q
            let lo = self.noise_std_clean[k].ln();
            let hi = self.noise_std_degraded[k].ln();
            out[k] = (hi + (lo - hi) * q).exp();
        }
        out
    }
}

/// Ground-truth states `[cos, sin, x, y, v, ω]` and sensor payloads.
pub fn simulate_odom2d<R: Rng>(
    config: &OdomSimConfig,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<Payload>) {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pose = Se2::new(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        0.0,
        0.0,
    );
    let mut v = config.mean_speed * rng.random_range(0.5..1.5);
    let mut w = rng.random_range(-0.03..0.03);
    let (mut a, mut b) = (0.0, 0.0);
    let mut q: f64 = rng.random_range(0.0..1.0);
    let mut states = Vec::with_capacity(config.length);
    let mut payloads = Vec::with_capacity(config.length);
    for t in 0..config.length {
        if t > 0 {
            pose = pose.compose(&Se2::exp(&Twist2::new(v * config.dt, 0.0, w * config.dt)));
            a = config.accel_persistence * a + config.accel_std * unit.sample(rng);
            b = config.accel_persistence * b + config.turn_accel_std * unit.sample(rng);
            v += a - config.speed_reversion * (v - config.mean_speed);
            w += b - config.turn_reversion * w;
            let target = if rng.random_bool(0.1) {
                rng.random_range(0.0..1.0)
            } else {
                q
            };
            q = config.quality_persistence * q
                + (1.0 - config.quality_persistence) * target
                + config.quality_std * unit.sample(rng);
            q = q.clamp(0.0, 1.0);
        }
        let reported = (q / config.quality_step).round() * config.quality_step;
        let std = config.noise_std(reported);
        let z = vec![v + std[0] * unit.sample(rng), w + std[1] * unit.sample(rng)];
        let mut s = pose.to_array().to_vec();
        s.extend([v, w]);
        states.push(s);
        payloads.push(Payload {
            z,
            feature: reported,
        });
    }
    (states, payloads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degraded_quality_gives_max_noise() {
        let c = OdomSimConfig::default();
        let degraded = c.noise_std(0.0);
        for k in 0..2 {
            assert!((degraded[k] - c.noise_std_degraded[k]).abs() < 1e-15);
        }
        let clean = c.noise_std(1.0);
        assert!((clean[0] - c.noise_std_clean[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_observes_truth() {
        // the log-space interpolation needs positive stds
        let c = OdomSimConfig {
            noise_std_clean: [1e-300; 2],
            noise_std_degraded: [1e-300; 2],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (states, payloads) = simulate_odom2d(&c, &mut rng);
        for (s, p) in states.iter().zip(&payloads) {
            assert!((p.z[0] - s[4]).abs() < 1e-200);
            assert!((p.z[1] - s[5]).abs() < 1e-200);
        }
    }

    #[test]
    fn integrating_true_velocities_reproduces_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (states, _) = simulate_odom2d(&OdomSimConfig::default(), &mut rng);
        let mut pose = Se2::from_slice(&states[0][..4]);
        for w in states.windows(2) {
            pose = pose.compose(&Se2::exp(&Twist2::new(w[0][4], 0.0, w[0][5])));
            let gt = Se2::from_slice(&w[1][..4]);
            for (a, b) in pose.to_array().iter().zip(gt.to_array()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
