use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for the parameters one optimizer has touched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) first: BTreeMap<String, Tensor>,
    pub(crate) second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    pub(crate) fn insert_moments(&mut self, name: String, first: Tensor, second: Tensor) {
        self.first.insert(name.clone(), first);
        self.second.insert(name, second);
    }

    pub(crate) fn moment_names(&self) -> Vec<String> {
        self.first.keys().cloned().collect()
    }

    /// One bias-corrected Adam update. Only parameters named in `grads`
    /// move; the step counter advances once per call.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = store
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("adam: unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let param = store.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, gv)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gv;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gv * gv;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
