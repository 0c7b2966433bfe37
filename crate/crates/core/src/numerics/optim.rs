use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// AdamW moments for every parameter of one store, plus per-parameter
/// learning-rate multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub(crate) first: Vec<Tensor>,
    pub(crate) second: Vec<Tensor>,
    pub(crate) lr_scale: Vec<f64>,
    pub(crate) step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        OptimizerState {
            config,
            second: zeros.clone(),
            first: zeros,
            lr_scale: vec![1.0; params.len()],
            step: 0,
        }
    }

    pub(crate) fn from_parts(
        config: AdamWConfig,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        lr_scale: Vec<f64>,
        step: u64,
    ) -> Self {
        OptimizerState {
            config,
            first,
            second,
            lr_scale,
            step,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second[id.index()]
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.lr_scale[id.index()]
    }

    /// One decoupled-weight-decay Adam update with bias correction.
    ///
    /// Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<ParamId, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("state has {} slots, store has {} parameters", self.first.len(), params.len()),
            ));
        }
        for (id, g) in grads {
            if g.shape() != params.get(*id).shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient {:?} for parameter {} of shape {:?}", g.shape(), params.name(*id), params.get(*id).shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", params.name(*id))));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let i = id.index();
            let lr_p = lr * self.lr_scale[i];
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] *= 1.0 - lr_p * weight_decay;
                p[j] -= lr_p * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
