#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of the entries selected by `mask`.
/// Returns `false` without touching anything if the gradient is not finite.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
    mask: &[bool],
) -> bool {
    if grad.iter().any(|g| !g.is_finite()) {
        return false;
    }
    state.t += 1;
    let b1t = 1.0 - config.beta1.powi(state.t as i32);
    let b2t = 1.0 - config.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        if !mask[i] {
            continue;
        }
        let g = grad[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut th = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        assert!(adam_step(
            &mut th,
            &[0.0, 0.0],
            &mut s,
            &AdamConfig::default(),
            &[true; 2]
        ));
        assert_eq!(th, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut th = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut th, &[3.0, -0.5], &mut s, &cfg, &[true; 2]);
        assert!((th[0] + 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((th[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn disjoint_gradients_update_independently() {
        let cfg = AdamConfig::default();
        let (mut a, mut b) = (vec![0.0, 0.0], vec![0.0, 0.0]);
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        adam_step(&mut a, &[1.0, 0.0], &mut sa, &cfg, &[true; 2]);
        adam_step(&mut b, &[1.0, 5.0], &mut sb, &cfg, &[true; 2]);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn masked_entries_and_bad_gradients() {
        let cfg = AdamConfig::default();
        let mut th = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut th, &[1.0, 1.0], &mut s, &cfg, &[false, true]);
        assert_eq!(th[0], 1.0);
        assert!(th[1] < 1.0);
        let before = th.clone();
        assert!(!adam_step(
            &mut th,
            &[f64::NAN, 0.0],
            &mut s,
            &cfg,
            &[true; 2]
        ));
        assert_eq!(th, before);
        assert_eq!(s.t, 1);
    }
}
