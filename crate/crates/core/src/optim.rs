//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{MugError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, base_lr: f64, warmup: usize, total: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moments mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One AdamW update. Parameters with `active[i] == false` are left
/// untouched (neither decayed nor moved); a missing gradient counts as zero.
/// `decay[i]` selects which parameters receive weight decay.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
    active: &[bool],
    decay: &[bool],
) -> Result<()> {
    if !state.matches(params) || active.len() != params.len() || decay.len() != params.len() {
        return Err(MugError::Shape("optimizer state does not match parameters".into()));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(MugError::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !active[id.0] {
            continue;
        }
        let grad = grads.get(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = params.get_mut(id);
        for i in 0..p.numel() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (T::one() - b1) * g;
            let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mut theta = p.data()[i];
            if decay[id.0] {
                theta = theta * shrink;
            }
            theta = theta - lr_t * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            p.data_mut()[i] = theta;
        }
    }
    Ok(())
}
