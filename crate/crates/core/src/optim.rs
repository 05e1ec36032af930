//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::math::{cos, sqrt};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: 0,
        }
    }

    /// One update. Parameters in frozen groups, and parameters without a
    /// gradient, are left untouched bit for bit.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(Some(g)) = grads.get(id.0) else {
                continue;
            };
            if lr == 0.0 {
                continue;
            }
            let decay = store.get(id).decay;
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let w = store.value_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                if decay {
                    w.data[i] -= lr * weight_decay * w.data[i];
                }
                w.data[i] -= lr * mhat / (sqrt(vhat) + eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps, with linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = (step - warmup).min(span) as f64 / span as f64;
    0.5 * base * (1.0 + cos(core::f64::consts::PI * t))
}

/// Global-norm gradient clipping. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let n = sqrt(total);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}
