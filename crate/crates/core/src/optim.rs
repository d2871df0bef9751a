//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state: first/second moment per parameter, in registration order.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update. `grads[i]` must exist and
    /// match `params[i]` elementwise.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "missing grad: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if grads[i].len() != p.numel() {
                return Err(Error::Usage(format!(
                    "grad {} has {} elements, parameter has {}",
                    i,
                    grads[i].len(),
                    p.numel()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.config.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.config.beta2);
        let bc1 = S::from_f64(1.0 / (1.0 - self.config.beta1.powf(t)));
        let bc2 = S::from_f64(1.0 / (1.0 - self.config.beta2.powf(t)));
        let lr = S::from_f64(self.config.lr);
        let eps = S::from_f64(self.config.eps);
        let wd = S::from_f64(self.config.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] * bc1;
                let v_hat = v[j] * bc2;
                *x = *x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *x);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            let v = x.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
