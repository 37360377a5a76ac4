//! SGD with momentum (L2 folded into the gradient) and AdamW (decoupled
//! weight decay), applied to named parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{config::POLY_POWER, LrSchedule, OptimizerKind, TrainConfig};
use crate::params::{Kind, ParamStore};
use crate::tensor::{Float, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `v <- mu v + g + wd w; w <- w - lr v`.
pub fn sgd_update<T: Float>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, wd: f64) {
    let (lr, mu, wd) = (T::c(lr), T::c(momentum), T::c(wd));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

/// Bias-corrected Adam moments with decoupled decay; `t` is the 1-based step.
pub fn adamw_update<T: Float>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, wd: f64) {
    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    let (lr, wd, eps) = (T::c(lr), T::c(wd), T::c(ADAM_EPS));
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Optimiser state: hyperparameters, step count and per-parameter slots.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { kind, lr, momentum, weight_decay, step: 0, slots: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Second-moment estimate of a parameter (AdamW only).
    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.slots.get(name).map(|s| s.second.as_slice()).filter(|s| !s.is_empty())
    }

    /// Updates every trainable parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, g) in grads {
            let w = store.get(name)?;
            if w.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        for (name, g) in grads {
            if store.kind(name) != Some(Kind::Param) {
                continue;
            }
            let n = g.numel();
            let adam = self.kind == OptimizerKind::AdamW;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                first: vec![T::zero(); n],
                second: if adam { vec![T::zero(); n] } else { Vec::new() },
            });
            let w = store.get_mut(name)?.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    sgd_update(w, g.data(), &mut slot.first, self.lr, self.momentum, self.weight_decay)
                }
                OptimizerKind::AdamW => {
                    adamw_update(w, g.data(), &mut slot.first, &mut slot.second, t, self.lr, self.weight_decay)
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`.
pub fn lr_at(base: f64, schedule: LrSchedule, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Poly => base * (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(POLY_POWER),
    }
}
