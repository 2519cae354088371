use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One step with decoupled weight decay: `p <- p (1 - lr wd)`, then the
    /// bias-corrected Adam update. Parameters without a gradient entry are
    /// still decayed.
    pub fn step(&self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for '{name}' has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let t = params.advance_step() as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let decay = 1.0 - self.lr * self.weight_decay;
            let Some(g) = grads.get(&name) else {
                if let Some(p) = params.get_mut(&name) {
                    p.data_mut().iter_mut().for_each(|v| *v *= decay);
                }
                continue;
            };
            let st = params.moments_mut(&name);
            for ((m, v), &gv) in st
                .m
                .data_mut()
                .iter_mut()
                .zip(st.v.data_mut().iter_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            }
            let update: Vec<f64> = st
                .m
                .data()
                .iter()
                .zip(st.v.data())
                .map(|(m, v)| (m / bc1) / ((v / bc2).sqrt() + self.eps))
                .collect();
            let p = params.get_mut(&name).expect("checked above");
            for (pv, u) in p.data_mut().iter_mut().zip(update) {
                *pv = *pv * decay - self.lr * u;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    AdamW {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    }
    .step(params, grads)
}
