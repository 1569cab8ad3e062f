use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::MedParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, created on first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Whether decoupled weight decay applies: matrices only, so biases,
/// layer-norm parameters and the temperature are left alone.
pub fn decays(param: &Tensor) -> bool {
    param.rank() == 2
}

/// One AdamW update of every parameter named in `grads`.
///
/// Decay is applied as `w ← w·(1 − lr·wd)` before the bias-corrected Adam
/// step. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut MedParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    adamw_step_scaled(params, grads, state, cfg, &|_| 1.0)
}

/// [`adamw_step`] with the learning rate of each parameter multiplied by
/// `lr_scale(name)`.
pub fn adamw_step_scaled(
    params: &mut MedParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr_scale: &dyn Fn(&str) -> f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| TrainError::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::UnknownParam(format!("{name} (gradient shape {:?})", g.shape())));
        }
        if !g.is_finite() {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            return Err(TrainError::NonFinite(format!(
                "gradient of {name} has {bad} non-finite entries"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let lr = cfg.lr * lr_scale(name);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let wd = decays(p);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            if wd {
                *w *= decay;
            }
            let gi = gi as f64;
            let mn = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}
