//! Learning-rate schedule and the two update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetParams;
use crate::real::Real;

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(lr0: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Schedule(format!("iteration {iter} outside [0, {max_iter}]")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with Nesterov momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: NetParams<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &NetParams<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    /// `g = grad + wd θ; v = μ v + g; θ -= lr (g + μ v)`.
    pub fn step(&mut self, params: &mut NetParams<T>, grads: &NetParams<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), v) in params.params.iter_mut().zip(&grads.params).zip(&mut self.velocity.params) {
            for ((theta, &grad), vel) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                let g = grad + wd * *theta;
                *vel = mu * *vel + g;
                *theta -= lr * (g + mu * *vel);
            }
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: NetParams<T>,
    pub v: NetParams<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &NetParams<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut NetParams<T>, grads: &NetParams<T>, lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powf(t));
        let c2 = T::of(1.0 - self.beta2.powf(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let layers = params.params.iter_mut().zip(&grads.params).zip(self.m.params.iter_mut().zip(&mut self.v.params));
        for ((p, g), (m, v)) in layers {
            for (((theta, &grad), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (one - b1) * grad;
                *v = b2 * *v + (one - b2) * grad * grad;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Constants of both optimizers as they appear in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConstants {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConstants {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Param;

    fn params(values: &[f64]) -> NetParams<f64> {
        NetParams {
            seed: 0,
            params: vec![Param {
                name: "w".into(),
                shape: vec![values.len()],
                data: values.to_vec(),
            }],
        }
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(2.5e-4, 0, 100, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 100, 100, 0.9).unwrap(), 0.0);
        // 2.5e-4 * 0.5^0.9 = 1.33971682817036645...e-4
        let mid = poly_lr(2.5e-4, 50, 100, 0.9).unwrap();
        assert!((mid / 1.339_716_828_170_366e-4 - 1.0).abs() < 1e-12);
        assert!(matches!(poly_lr(1.0, 101, 100, 0.9), Err(Error::Schedule(_))));
    }

    #[test]
    fn nesterov_matches_hand_computation() {
        let mut p = params(&[1.0]);
        let g = params(&[0.5]);
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        opt.step(&mut p, &g, 0.1);
        // g = 0.5 + 0.1 = 0.6; v = 0.6; step = 0.6 + 0.54 = 1.14
        assert!((p.params[0].data[0] - (1.0 - 0.114)).abs() < 1e-15);
        let theta = p.params[0].data[0];
        opt.step(&mut p, &g, 0.1);
        let g2 = 0.5 + 0.1 * theta;
        let v2 = 0.9 * 0.6 + g2;
        assert!((p.params[0].data[0] - (theta - 0.1 * (g2 + 0.9 * v2))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut p = params(&[1.0, -2.0]);
        let zero = params(&[0.0, 0.0]);
        let mut opt = Sgd::new(&p, 0.9, 1e-4);
        let before = p.squared_norm();
        opt.step(&mut p, &zero, 0.01);
        assert!(p.squared_norm() < before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = params(&[1.0, 1.0]);
        let g = params(&[3.0, -0.01]);
        let mut opt = Adam::new(&p, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &g, 0.1);
        assert!((p.params[0].data[0] - 0.9).abs() < 1e-7);
        assert!((p.params[0].data[1] - 1.1).abs() < 1e-5);
        assert_eq!(opt.steps, 1);
    }
}
