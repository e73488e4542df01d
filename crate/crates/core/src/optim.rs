//! AdamW with a linear warm-up then constant learning rate.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Linear ramp over the first `warmup_ratio` of `total_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        libm::round(self.warmup_ratio * self.total_steps as f64) as usize
    }

    /// Rate used for the step with zero-based index `step`.
    pub fn rate(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.base_lr * (step + 1) as f64 / w as f64
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update to every tensor in `params` using its `grad`, and
    /// return the learning rate that was used.
    pub fn step(&mut self, params: &mut [&mut Tensor], schedule: &LrSchedule) -> Result<f64> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad { param: i });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        let lr = schedule.rate(self.step);
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().unwrap_or_default();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * (m_hat / (libm::sqrt(v_hat) + eps) + weight_decay * *w);
            }
            p.grad = Some(grad);
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).trainable();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = param(1.5, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let sched = LrSchedule { base_lr: 0.1, total_steps: 10, warmup_ratio: 0.0 };
        opt.step(&mut [&mut p], &sched).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn warmup_ramp() {
        let sched = LrSchedule { base_lr: 2.0, total_steps: 100, warmup_ratio: 0.05 };
        assert_eq!(sched.warmup_steps(), 5);
        assert!((sched.rate(0) - 2.0 / 5.0).abs() < 1e-15);
        assert!((sched.rate(4) - 2.0).abs() < 1e-15);
        assert_eq!(sched.rate(50), 2.0);
    }

    #[test]
    fn zero_betas_reduce_to_sign_sgd() {
        // With beta1 = beta2 = 0 the moments are the raw gradient, so the
        // update is lr * g / (|g| + eps).
        let mut p = param(0.0, 1.0);
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg);
        let sched = LrSchedule { base_lr: 0.5, total_steps: 1, warmup_ratio: 0.0 };
        opt.step(&mut [&mut p], &sched).unwrap();
        let expected = -0.5 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Tensor::scalar(1.0).trainable();
        let mut opt = AdamW::new(AdamWConfig::default());
        let sched = LrSchedule { base_lr: 0.1, total_steps: 1, warmup_ratio: 0.0 };
        assert_eq!(opt.step(&mut [&mut p], &sched), Err(Error::MissingGrad { param: 0 }));
    }
}
