//! Adam with decoupled weight decay and a cosine-annealed learning rate.
//! Moments are kept in f64 regardless of the parameter precision so repeated
//! small updates do not wash out.

use crate::error::{Error, Result};
use crate::params::{ParamIdx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Grads, ValId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps from base_lr down to min_lr.
    pub horizon: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            horizon: 1,
        }
    }
}

/// lr(t) = min + 0.5 (base - min)(1 + cos(pi t / T)), clamped past the horizon.
pub fn cosine_lr(cfg: &OptimConfig, t: usize) -> f64 {
    let horizon = cfg.horizon.max(1);
    let frac = t.min(horizon) as f64 / horizon as f64;
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub struct OptimState {
    pub cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step_count: usize,
}

impl OptimState {
    pub fn new<T: Scalar>(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect::<Vec<_>>();
        let v = m.clone();
        OptimState { cfg, m, v, step_count: 0 }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(&self.cfg, self.step_count)
    }

    /// Applies one update. `leaves` aligns store order with tape values; a
    /// parameter absent from the gradients (off the loss path) is treated as
    /// zero-gradient and still decays.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        leaves: &[ValId],
        grads: &Grads<T>,
    ) -> Result<f64> {
        let lr = self.lr();
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        for i in 0..store.len() {
            let g = grads.get(leaves[i]);
            if let Some(gt) = g {
                if !gt.all_finite() {
                    return Err(Error::Training(format!(
                        "non-finite gradient in {}",
                        store.get(ParamIdx(i)).name
                    )));
                }
            }
            let p = store.get_mut(ParamIdx(i));
            let (ms, vs) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |gt| gt.data()[j].dbl());
                ms[j] = b1 * ms[j] + (1.0 - b1) * gj;
                vs[j] = b2 * vs[j] + (1.0 - b2) * gj * gj;
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                let wj = w.dbl();
                *w = T::of(wj - lr * (mhat / (vhat.sqrt() + eps) + wd * wj));
            }
        }
        self.step_count += 1;
        Ok(lr)
    }
}
