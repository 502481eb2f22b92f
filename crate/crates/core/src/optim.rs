//! AdamW with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 2e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` at step 0 to `0` at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let p = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

pub struct AdamW<T: Element> {
    cfg: AdamWConfig,
    schedule: CosineSchedule,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>, total_steps: usize) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, _, p)| Tensor::zeros(p.dims().to_vec()))
                .collect()
        };
        Self {
            cfg,
            schedule: CosineSchedule {
                base: cfg.lr,
                total_steps,
            },
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update over every parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    params.name(id)
                )));
            }
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64();
                let mi = c.beta1 * m[i].to_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].to_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p[i].to_f64();
                let upd = mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pi;
                p[i] = T::from_f64(pi - lr * upd);
            }
        }
        Ok(())
    }
}
