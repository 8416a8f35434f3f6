//! SGD with momentum, Adam, and cosine learning-rate annealing.
//!
//! Weight decay is coupled: `wd · p` is added to the gradient before the
//! update, for both optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{c, Scalar};

/// `η_min + ½(η_max − η_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: f64, total: f64, lr_max: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Annealed over `total` schedule steps (epochs).
    Cosine { lr_max: f64, lr_min: f64, total: usize },
}

impl LrSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                lr_max,
                lr_min,
                total,
            } => cosine_lr(t as f64, total as f64, lr_max, lr_min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    /// Rescale all gradients so their global L2 norm is at most this value.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    /// SGD with momentum 0.9 on a cosine schedule.
    pub fn sgd_cosine(lr_max: f64, lr_min: f64, total: usize, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            schedule: LrSchedule::Cosine {
                lr_max,
                lr_min,
                total,
            },
            weight_decay,
            grad_clip: Some(5.0),
        }
    }

    /// Adam at a constant rate.
    pub fn adam(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1,
                beta2,
                eps: 1e-8,
            },
            schedule: LrSchedule::Constant { lr },
            weight_decay,
            grad_clip: None,
        }
    }

    /// Checks every setting; errors name the offending field relative to
    /// this struct (`schedule.lr`, `momentum`, ...).
    pub fn validate(&self) -> Result<()> {
        let lr0 = match self.schedule {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                lr_max,
                lr_min,
                total,
            } => {
                if total == 0 {
                    return Err(Error::config("schedule.total", "must be positive"));
                }
                if !(lr_min >= 0.0 && lr_min <= lr_max) {
                    return Err(Error::config("schedule.lr_min", "must lie in [0, lr_max]"));
                }
                lr_max
            }
        };
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(Error::config("schedule.lr", "learning rate must be positive"));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config("momentum", "must lie in [0, 1)"));
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) {
                    return Err(Error::config("beta1", "must lie in [0, 1)"));
                }
                if !(beta2 > 0.0 && beta2 < 1.0) {
                    return Err(Error::config("beta2", "must lie in (0, 1)"));
                }
                if !(eps > 0.0) {
                    return Err(Error::config("eps", "must be positive"));
                }
            }
            _ => {}
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.schedule.at(t)
    }
}

/// Scales every gradient in `store` so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in store.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            }).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k: T = c(max_norm / (norm + 1e-6));
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v = *v * k);
            }
        }
    }
    norm
}

/// One SGD-with-momentum update at learning rate `cfg.lr_at(t)`.
/// Parameters without a gradient are left untouched.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimizerConfig, t: usize) -> Result<()> {
    let OptimizerKind::Sgd { momentum } = cfg.kind else {
        return Err(Error::InvalidArgument("sgd_step needs an SGD config".into()));
    };
    if let Some(clip) = cfg.grad_clip {
        clip_grad_norm(store, clip);
    }
    let lr: T = c(cfg.lr_at(t));
    let wd: T = c(cfg.weight_decay);
    let mu: T = c(momentum);
    for (_, p, st) in store.iter_with_state() {
        let Some(grad) = p.grad() else { continue };
        let g: Vec<T> = grad
            .iter()
            .zip(p.data())
            .map(|(&g, &w)| g + wd * w)
            .collect();
        let buf = match st.first.as_mut() {
            Some(buf) => {
                for (b, &gv) in buf.iter_mut().zip(&g) {
                    *b = mu * *b + gv;
                }
                buf
            }
            None => st.first.insert(g),
        };
        st.step += 1;
        for (w, &b) in p.data_mut().iter_mut().zip(buf.iter()) {
            *w = *w - lr * b;
        }
    }
    Ok(())
}

/// One bias-corrected Adam update at learning rate `cfg.lr_at(t)`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimizerConfig, t: usize) -> Result<()> {
    let OptimizerKind::Adam { beta1, beta2, eps } = cfg.kind else {
        return Err(Error::InvalidArgument("adam_step needs an Adam config".into()));
    };
    if let Some(clip) = cfg.grad_clip {
        clip_grad_norm(store, clip);
    }
    let lr = cfg.lr_at(t);
    let wd: T = c(cfg.weight_decay);
    let (b1, b2): (T, T) = (c(beta1), c(beta2));
    let eps_t: T = c(eps);
    for (_, p, st) in store.iter_with_state() {
        let Some(grad) = p.grad() else { continue };
        let g: Vec<T> = grad
            .iter()
            .zip(p.data())
            .map(|(&g, &w)| g + wd * w)
            .collect();
        let n = g.len();
        let m = st.first.get_or_insert_with(|| vec![T::zero(); n]);
        for (m, &gv) in m.iter_mut().zip(&g) {
            *m = b1 * *m + (T::one() - b1) * gv;
        }
        let v = st.second.get_or_insert_with(|| vec![T::zero(); n]);
        for (v, &gv) in v.iter_mut().zip(&g) {
            *v = b2 * *v + (T::one() - b2) * gv * gv;
        }
        st.step += 1;
        let bc1: T = c(1.0 - beta1.powi(st.step as i32));
        let bc2: T = c(1.0 - beta2.powi(st.step as i32));
        let step: T = c(lr);
        let (m, v) = (st.first.as_ref().expect("set"), st.second.as_ref().expect("set"));
        for ((w, &mv), &vv) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *w = *w - step * mhat / (vhat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Dispatches on the configured optimizer kind.
pub fn step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimizerConfig, t: usize) -> Result<()> {
    match cfg.kind {
        OptimizerKind::Sgd { .. } => sgd_step(store, cfg, t),
        OptimizerKind::Adam { .. } => adam_step(store, cfg, t),
    }
}


/// Maps the field named by a validation error to the key a config file uses.
pub(crate) fn rename_field(e: Error, rename: impl Fn(&str) -> String) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: rename(&field),
            reason,
        },
        other => other,
    }
}
