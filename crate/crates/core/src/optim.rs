//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Vec<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. The decay `p *= 1 - lr * wd` is applied to the parameter
    /// before the adaptive step and never enters the moments.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Shape(format!("gradient {i} has wrong length")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} is not finite")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step_size = T::of(lr / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() / sqrt_bc2 + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![vec![0.3f64, -1.2], vec![4.0]];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p);
        let g = vec![vec![0.0, 0.0], vec![0.0]];
        for _ in 0..5 {
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let lr = 1e-3;
        let mut p = vec![vec![2.0f64]];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![1.0]], lr).unwrap();
        let expected = 2.0 - lr / (1.0 + 1e-8);
        assert!((p[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let lr = 0.1;
        let mut p = vec![vec![3.0f64]];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[vec![0.0]], lr).unwrap();
        assert!((p[0][0] - 3.0 * (1.0 - lr * 0.01)).abs() < 1e-15);
        assert!(opt.m[0][0] == 0.0 && opt.v[0][0] == 0.0);
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut p = vec![vec![1.0f32]];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(
            opt.step(&mut p, &[vec![f32::NAN]], 1e-3),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(opt.step, 0);
    }
}
