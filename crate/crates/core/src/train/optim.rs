//! AdamW, warmup + cosine schedule, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::adapter::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with decoupled weight decay. Decay skips the `alpha` slot.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Params<f64>,
    v: Params<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shape: &Params<f64>) -> Self {
        Self {
            cfg,
            m: Params::zeros_like(shape),
            v: Params::zeros_like(shape),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<f64>, grads: &Params<f64>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let slots = params
            .slots_mut()
            .into_iter()
            .zip(grads.slots())
            .zip(self.m.slots_mut())
            .zip(self.v.slots_mut());
        for (slot, (((p, g), m), v)) in slots.enumerate() {
            let decay = if slot == 0 { 0.0 } else { c.weight_decay };
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * decay * p[i];
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let last = self.total.saturating_sub(1);
        if last <= self.warmup {
            return self.floor;
        }
        let progress = ((step - self.warmup) as f64 / (last - self.warmup) as f64).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescale `grads` in place so the global norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_global_norm(grads: &mut Params<f64>, max_norm: f64) -> (f64, f64) {
    let pre = grads.norm();
    if pre > max_norm {
        grads.scale_in_place(max_norm / pre);
        (pre, grads.norm())
    } else {
        (pre, pre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(alpha: f64, bias: Vec<f64>) -> Params<f64> {
        Params {
            alpha: vec![alpha],
            bias,
            ..Params::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            peak: 0.01,
            floor: 0.0,
            warmup: 10,
            total: 100,
        };
        for k in 0..10 {
            assert_relative_eq!(s.lr(k), 0.01 * (k + 1) as f64 / 10.0);
        }
        assert_relative_eq!(s.lr(9), 0.01);
        assert_relative_eq!(s.lr(10), 0.01);
        assert!(s.lr(99) <= 1e-4 * 0.01);
        for k in 10..99 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = params(5.0, vec![1.0, -1.0]);
        let g = params(2.0, vec![-3.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        opt.step(&mut p, &g, 0.1);
        assert_relative_eq!(p.alpha[0], 4.9, epsilon = 1e-6);
        assert_relative_eq!(p.bias[0], 1.1, epsilon = 1e-6);
        assert_eq!(p.bias[1], -1.0);
    }

    #[test]
    fn decay_skips_alpha() {
        let mut p = params(5.0, vec![2.0]);
        let g = params(0.0, vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..100 {
            opt.step(&mut p, &g, 0.01);
        }
        assert_eq!(p.alpha[0], 5.0);
        assert!(p.bias[0] < 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = params(3.0, vec![4.0]);
        let (pre, post) = clip_global_norm(&mut g, 0.5);
        assert_relative_eq!(pre, 5.0);
        assert_relative_eq!(post, 0.5, epsilon = 1e-12);
        let mut small = params(0.1, vec![0.0]);
        assert_eq!(clip_global_norm(&mut small, 0.5), (0.1, 0.1));
    }
}
