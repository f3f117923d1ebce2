//! SGD with momentum and LARS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GradSet, ParamKind, ParamSet};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFinite(String),
    #[error("gradient set has {grads} entries for {params} parameters")]
    Mismatch { params: usize, grads: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LarsConfig {
    pub base_lr: f64,
    /// Trust coefficient η.
    pub trust: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.0,
            trust: 1e-3,
            weight_decay: 1e-6,
            momentum: 0.9,
            warmup_epochs: 10,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.trust > 0.0) {
            return Err(OptimError::Config("trust coefficient must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::Config("weight decay must be >= 0".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config("need base_lr > 0 and momentum in [0,1)".into()));
        }
        Ok(())
    }
}

fn check<T: Real>(params: &ParamSet<T>, grads: &GradSet<T>) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::Mismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if !g.is_finite() {
            return Err(OptimError::NonFinite(p.name.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SgdState<T: Real = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamSet<T>, cfg: &SgdConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
        }
    }
}

/// `v ← μv + g; w ← w − lr·v`
pub fn sgd_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut SgdState<T>,
) -> Result<(), OptimError> {
    check(params, grads)?;
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(state.velocity.iter_mut()) {
        for ((w, &gi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let nv = state.momentum * vi.to_f64() + gi.to_f64();
            *vi = T::from_f64(nv);
            *w = T::from_f64(w.to_f64() - state.lr * nv);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LarsState<T: Real = f32> {
    pub base_lr: f64,
    pub trust: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> LarsState<T> {
    pub fn new(params: &ParamSet<T>, cfg: &LarsConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self {
            base_lr: cfg.base_lr,
            trust: cfg.trust,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
        })
    }
}

/// Layer-wise trust ratio `η‖w‖ / (‖g‖ + λ‖w‖)`, or 1 when either norm is zero.
pub fn lars_local_lr(w_norm: f64, g_norm: f64, trust: f64, weight_decay: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        trust * w_norm / (g_norm + weight_decay * w_norm)
    } else {
        1.0
    }
}

/// `v ← μv + local_lr·base_lr·(g + λw); w ← w − v`.
/// Bias tensors skip the trust ratio (`local_lr = 1`).
pub fn lars_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut LarsState<T>,
) -> Result<(), OptimError> {
    check(params, grads)?;
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(state.velocity.iter_mut()) {
        let local = match p.kind {
            ParamKind::Bias => 1.0,
            ParamKind::Weight => {
                lars_local_lr(p.value.norm_f64(), g.norm_f64(), state.trust, state.weight_decay)
            }
        };
        let step = local * state.base_lr;
        for ((w, &gi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let wf = w.to_f64();
            let nv = state.momentum * vi.to_f64() + step * (gi.to_f64() + state.weight_decay * wf);
            *vi = T::from_f64(nv);
            *w = T::from_f64(wf - nv);
        }
    }
    Ok(())
}

/// Linear warmup over `warmup` epochs, then cosine decay to zero at `total`.
/// `progress` is the fractional number of epochs completed once the
/// current step is taken, so the first step already gets a non-zero rate.
pub fn warmup_cosine(base: f64, progress: f64, warmup: usize, total: usize) -> f64 {
    let warmup = warmup.min(total) as f64;
    let total = total as f64;
    if progress < warmup {
        return base * progress / warmup;
    }
    if total <= warmup {
        return base;
    }
    let t = ((progress - warmup) / (total - warmup)).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
