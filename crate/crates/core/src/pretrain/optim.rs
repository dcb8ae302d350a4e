//! AdamW with decoupled weight decay and the warm-up/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Linear warm-up to `base_lr` over the first `ceil(warmup_ratio · total)`
/// iterations, then linear decay to zero at `total`. Iterations count from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub warmup_ratio: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_iters: usize, warmup_ratio: f64) -> Result<Self> {
        if total_iters == 0 || !(0.0..=1.0).contains(&warmup_ratio) || base_lr.is_nan() || base_lr < 0.0 {
            return invalid(format!(
                "bad schedule: base_lr {base_lr}, total_iters {total_iters}, warmup_ratio {warmup_ratio}"
            ));
        }
        Ok(Self {
            base_lr,
            total_iters,
            warmup_ratio,
        })
    }

    /// Last warm-up iteration, where the rate peaks at `base_lr`.
    pub fn warmup_iters(&self) -> usize {
        // The tolerance keeps products such as 0.05 * 1000 from rounding up.
        let w = (self.warmup_ratio * self.total_iters as f64 - 1e-9).ceil().max(0.0) as usize;
        w.min(self.total_iters)
    }

    pub fn lr(&self, iter: usize) -> f64 {
        let (t, w) = (self.total_iters, self.warmup_iters());
        if iter >= t {
            0.0
        } else if iter <= w {
            self.base_lr * (iter as f64 / w as f64)
        } else {
            self.base_lr * ((t - iter) as f64 / (t - w) as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Optimizer state: step count and first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter with a gradient. Weight
    /// decay is decoupled and only applied to matrices, not to biases, layer
    /// norm parameters or embedding vectors. Non-finite gradients abort the
    /// step before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return invalid("optimizer state does not match the parameter store");
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return invalid(format!("gradient shape mismatch for `{}`", store.name(id)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let decay = if store.get(id).shape().len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                p[j] *= 1.0 - lr * decay;
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
