use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{CkfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay. Moments and the bias-correction step
/// count are tracked per parameter, so a parameter that sits out a step
/// (another task's adapter) keeps its state untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.t)
    }

    /// Updates every parameter named in `grads`. `decay` selects the
    /// parameters that receive weight decay.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        decay: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let c = self.cfg;
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(CkfError::Numeric(format!("non-finite gradient in {name}[{i}]")));
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(CkfError::Dimension {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let wd = if decay(name) { c.lr * c.weight_decay } else { 0.0 };
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *x -= wd * *x;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                *x -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
