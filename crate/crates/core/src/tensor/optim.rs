use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates and the step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, MomentState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&MomentState> {
        self.state.get(name)
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &MomentState)> {
        self.state.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_state(&mut self, name: impl Into<String>, state: MomentState) {
        self.state.insert(name.into(), state);
    }

    /// Updates every parameter accepted by `trainable`. Parameters outside
    /// the filter keep both their values and their moment state.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let names: Vec<String> = store
            .names()
            .filter(|n| trainable(n))
            .map(str::to_string)
            .collect();
        for name in names {
            let p = store.get_mut(&name).expect("name from store");
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::usage(format!("parameter '{name}' has no gradient")))?;
            let st = self.state.entry(name).or_insert_with(|| MomentState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

/// `lr_init · (1 + cos(π · step / total_steps)) / 2`
pub fn cosine_annealing_lr(step: usize, total_steps: usize, lr_init: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::usage(format!(
            "schedule step {step} outside [0, {total_steps}]"
        )));
    }
    Ok(lr_init * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}
