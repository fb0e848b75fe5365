//! Adam with decoupled weight decay and a warmup/cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Reference learning rate before `lr_scale`.
    pub base_lr: f64,
    /// Multiplier applied to `base_lr`.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Learning-rate factor at step 0 of the warmup.
    pub warmup_start: f64,
    /// Cosine decay length after warmup; `None` keeps the rate constant.
    #[serde(default)]
    pub decay_steps: Option<usize>,
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptimConfig {
    /// Bottleneck defaults: `5e-5` reference rate and `5e-4` weight decay.
    pub fn bottleneck() -> Self {
        Self {
            base_lr: 5e-5,
            lr_scale: 40.0,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 200,
            warmup_start: 0.1,
            decay_steps: None,
            min_lr_ratio: 0.1,
            batch_size: 32,
            epochs: 60,
            seed: 0,
        }
    }

    /// Generator defaults: `3e-5` reference rate, `5e-4` weight decay.
    pub fn flow() -> Self {
        Self { base_lr: 3e-5, lr_scale: 40.0, epochs: 200, ..Self::bottleneck() }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.base_lr * self.lr_scale;
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return peak * (self.warmup_start + (1.0 - self.warmup_start) * frac);
        }
        match self.decay_steps {
            Some(n) if n > 0 => {
                let frac = ((step - self.warmup_steps) as f64 / n as f64).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                peak * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
            }
            _ => peak,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update of `params` in place; returns the learning rate used.
    pub fn update(&mut self, cfg: &OptimConfig, params: &mut [f64], grad: &[f64]) -> f64 {
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig { warmup_steps: 10, decay_steps: Some(10), ..OptimConfig::bottleneck() };
        let peak = cfg.base_lr * cfg.lr_scale;
        assert!((cfg.lr_at(0) - 0.1 * peak).abs() < 1e-18);
        assert!((cfg.lr_at(10) - peak).abs() < 1e-18);
        assert!((cfg.lr_at(20) - 0.1 * peak).abs() < 1e-15);
        assert!((cfg.lr_at(500) - 0.1 * peak).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig { warmup_steps: 0, weight_decay: 0.0, base_lr: 0.05, lr_scale: 1.0, ..OptimConfig::bottleneck() };
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 4.0 * x[1]];
            adam.update(&cfg, &mut x, &g);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3);
    }
}
