use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamGroup, ParamStore};
use super::NumericsError;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![0.0; store.get(id).numel()])
                .collect()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update with per-group learning rates. Groups missing from
    /// `lrs` are not updated; their moments are left untouched.
    ///
    /// Decay is decoupled: `θ ← θ − lr·λ·θ` is applied directly to the
    /// parameter, never through the moment estimates.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        lrs: &BTreeMap<ParamGroup, f64>,
    ) -> Result<(), NumericsError> {
        for id in store.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(NumericsError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        for &lr in lrs.values() {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(NumericsError::InvalidArgument(format!(
                    "learning rate must be ≥ 0, got {lr}"
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(&lr) = lrs.get(&store.group(id)) else {
                continue;
            };
            if lr == 0.0 {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * weight_decay * theta[i];
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single-group convenience wrapper around [`OptimizerState::step`].
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &GradBuffer,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), NumericsError> {
    if !(lr > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    let lrs = [(ParamGroup::Backbone, lr), (ParamGroup::Head, lr)]
        .into_iter()
        .collect();
    state.step(store, grads, &lrs)
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    min_lr: f64,
) -> Result<f64, NumericsError> {
    if total_steps == 0 {
        return Err(NumericsError::InvalidArgument(
            "cosine schedule needs total_steps > 0".into(),
        ));
    }
    if step > total_steps {
        return Err(NumericsError::InvalidArgument(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos()))
}
