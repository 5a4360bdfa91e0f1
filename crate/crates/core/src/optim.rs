//! AdamW with decoupled weight decay, global-norm clipping and the linear warmup/decay schedule.

use crate::error::{Error, Result};
use crate::model::{decay_exempt, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW { config, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update with learning rate `lr`; `grads` is aligned with the parameter store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let names = params.names().to_vec();
        for (i, (name, p)) in names.iter().zip(params.tensors_mut()).enumerate() {
            let wd = if decay_exempt(name) { 0.0 } else { weight_decay };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != p.len() {
                return Err(Error::Dimension(format!("gradient for {name} has {} entries, expected {}", g.len(), p.len())));
            }
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Linear warmup to `peak` over `round(warmup_ratio · step_max)` steps, then linear decay to 0 at `step_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub step_max: u64,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, step_max: u64) -> Self {
        let warmup = ((warmup_ratio * step_max as f64).round() as u64).min(step_max);
        LinearSchedule { peak, warmup, step_max }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.step_max);
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if self.step_max == self.warmup {
            self.peak
        } else {
            self.peak * (self.step_max - step) as f64 / (self.step_max - self.warmup) as f64
        }
    }
}
