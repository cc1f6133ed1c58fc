//! Adaptive-moment gradient descent over a subset of a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(config("learning_rate must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<ParamId>) -> Self {
        Self {
            config,
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every owned parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for &id in &self.params {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors as named entries for checkpointing.
    pub fn state_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(self.step as f64))];
        for &id in &self.params {
            let name = format!("{:?}/{}", store.entry(id).group, store.entry(id).name);
            if let (Some(m), Some(v)) = (self.m.get(&id), self.v.get(&id)) {
                out.push((format!("m:{name}"), m.clone()));
                out.push((format!("v:{name}"), v.clone()));
            }
        }
        out
    }

    /// Restores moments written by [`Adam::state_entries`].
    pub fn restore(&mut self, store: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor> =
            entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        self.step = lookup
            .get("step")
            .map(|t| t.item() as u64)
            .ok_or_else(|| config("optimizer state missing step counter"))?;
        self.m.clear();
        self.v.clear();
        for &id in &self.params {
            let name = format!("{:?}/{}", store.entry(id).group, store.entry(id).name);
            if let (Some(m), Some(v)) = (
                lookup.get(format!("m:{name}").as_str()),
                lookup.get(format!("v:{name}").as_str()),
            ) {
                self.m.insert(id, (*m).clone());
                self.v.insert(id, (*v).clone());
            }
        }
        Ok(())
    }
}
