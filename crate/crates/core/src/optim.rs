//! Adam and the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Serializable optimizer state, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter present in `grads`. Frozen parameters
    /// are never touched; a non-finite gradient aborts before any change.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (&id, g) in grads {
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (
                    Tensor::zeros(g.rows(), g.cols()),
                    Tensor::zeros(g.rows(), g.cols()),
                )
            });
            let p = store.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        let mut s = AdamState {
            step: self.step,
            ..Default::default()
        };
        for (id, (m, v)) in &self.moments {
            s.first.insert(store.name(*id).to_string(), m.clone());
            s.second.insert(store.name(*id).to_string(), v.clone());
        }
        s
    }

    pub fn from_state(config: AdamConfig, state: &AdamState, store: &ParamStore) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, m) in &state.first {
            let id = store.id(name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for unknown parameter {name}"))
            })?;
            let v = state
                .second
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            moments.insert(id, (m.clone(), v.clone()));
        }
        Ok(Adam {
            config,
            step: state.step,
            moments,
        })
    }
}

/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`, with
/// `step` counted from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub d_model: usize,
    pub warmup: u64,
    pub scale: f64,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}
