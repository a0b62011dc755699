//! Adam with bias correction.

use crate::autodiff::Tensor;
use crate::error::{MranError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global-norm clip over the parameter set; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
        }
    }
}

/// Moment buffers for one parameter set. Buffers are allocated on the first
/// step and must keep matching the parameters' shapes afterwards.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One Adam update over `params` using their accumulated gradients.
    /// Gradients are left in place.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() && self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(MranError::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let g = p
                .grad()
                .ok_or_else(|| MranError::Usage(format!("parameter {i} has no gradient")))?;
            if g.len() != self.m[i].len() {
                return Err(MranError::dim("adam_step", p.shape(), &[self.m[i].len()]));
            }
        }

        let cfg = &self.config;
        let clip = if cfg.max_grad_norm > 0.0 {
            let norm = params
                .iter()
                .flat_map(|p| p.grad().unwrap_or(&[]))
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.max_grad_norm {
                cfg.max_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let values = p.values_mut();
            for (j, value) in values.iter_mut().enumerate() {
                let g = grad[j] * clip + cfg.weight_decay * *value;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *value -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value).with_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap().with_grad();
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = scalar_param(1.0, 0.5);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        // m_hat = g, v_hat = g^2 at t = 1
        let expected = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8));
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert!((p.values()[0] - 0.9999).abs() < 1e-9);
    }

    #[test]
    fn two_constant_steps_decrease_monotonically() {
        let mut p = scalar_param(1.0, 0.5);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        let after_one = p.values()[0];
        opt.step(&mut [&mut p]).unwrap();
        let after_two = p.values()[0];
        assert!(after_one < 1.0 && after_two < after_one);
        // constant gradients give m_hat/sqrt(v_hat) = 1 at every step
        assert!((after_two - (1.0 - 2.0 * 1e-4 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamState::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut [&mut p]), Err(MranError::Usage(_))));
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = scalar_param(1.0, 0.1);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        let mut q = Tensor::vector(vec![0.0, 0.0]).unwrap().with_grad();
        assert!(opt.step(&mut [&mut q]).is_err());
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = Tensor::scalar(5.0).with_grad();
        let mut opt = AdamState::new(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        let mut steps = 0;
        while p.values()[0].abs() >= 0.1 {
            p.zero_grad();
            let x = p.values()[0];
            p.accumulate_grad(&[x]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            steps += 1;
            assert!(steps < 5000, "no convergence");
        }
    }

    #[test]
    fn weight_decay_and_clipping_knobs() {
        let mut p = Tensor::scalar(2.0).with_grad();
        let mut opt = AdamState::new(AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.values()[0] < 2.0);

        let mut p = scalar_param(0.0, 100.0);
        let mut opt = AdamState::new(AdamConfig {
            max_grad_norm: 1.0,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert!((opt.second_moments()[0][0] - 0.001).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn v_stays_nonnegative_and_first_step_bounded(
            grads in proptest::collection::vec(-1e6f64..1e6, 1..8)
        ) {
            let mut p = Tensor::vector(vec![0.0; grads.len()]).unwrap().with_grad();
            p.accumulate_grad(&grads).unwrap();
            let mut opt = AdamState::new(AdamConfig::default());
            opt.step(&mut [&mut p]).unwrap();
            for d in p.values() {
                prop_assert!(d.abs() <= 1e-4 * 1.1);
            }
            prop_assert!(opt.second_moments()[0].iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn constant_gradient_steps_bounded(g in -1e3f64..1e3, steps in 1usize..200) {
            let mut p = scalar_param(0.0, g);
            let mut opt = AdamState::new(AdamConfig::default());
            let mut prev = 0.0;
            for _ in 0..steps {
                opt.step(&mut [&mut p]).unwrap();
                let now = p.values()[0];
                prop_assert!((now - prev).abs() <= 1e-4 * 1.1);
                prev = now;
            }
        }

        #[test]
        fn equal_magnitude_steps_bounded(g in 1e-3f64..1e3, signs in proptest::collection::vec(any::<bool>(), 1..200)) {
            let mut p = Tensor::scalar(0.0).with_grad();
            let mut opt = AdamState::new(AdamConfig::default());
            let mut prev = 0.0;
            for s in signs {
                p.zero_grad();
                p.accumulate_grad(&[if s { g } else { -g }]).unwrap();
                opt.step(&mut [&mut p]).unwrap();
                let now = p.values()[0];
                prop_assert!((now - prev).abs() <= 1e-4 * 1.1);
                prev = now;
            }
        }
    }

    #[test]
    fn spike_after_quiet_gradients_exceeds_lr() {
        // the per-coordinate step bound is (1 - beta1) / sqrt(1 - beta2) * lr in
        // general, not lr
        let mut p = Tensor::scalar(0.0).with_grad();
        let mut opt = AdamState::new(AdamConfig::default());
        for _ in 0..2000 {
            p.zero_grad();
            p.accumulate_grad(&[1e-6]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        let before = p.values()[0];
        p.zero_grad();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let jump = (p.values()[0] - before).abs();
        assert!(jump > 1.1e-4 && jump < 1e-4 * 0.1 / 0.001f64.sqrt());
    }
}
