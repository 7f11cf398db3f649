//! Optimizers over named parameters.
//!
//! State is keyed by parameter name, so it survives pruning of unrelated
//! tensors and serializes into checkpoints as-is.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Scores and norm parameters are never decayed. Relative position bias
/// tables follow the usual Swin exemption.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("score.") || name.contains("norm") || name.ends_with("rel_pos_bias"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

fn grad_for<'g, T: Element>(grads: &'g Gradients<T>, name: &str, p: &Tensor<T>) -> Result<&'g Tensor<T>> {
    let g = grads
        .named(name)
        .ok_or_else(|| Error::Usage(format!("no gradient for parameter '{name}'; run backward first")))?;
    if g.shape() != p.shape() {
        return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
    }
    Ok(g)
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// One update of every listed parameter. All gradients are looked up
    /// before anything is written, so a missing one leaves the model intact.
    pub fn step<T: Element>(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &Gradients<T>) -> Result<()> {
        let c = self.config;
        let mut work = Vec::with_capacity(params.len());
        for (name, p) in params {
            let g = grad_for(grads, &name, p)?;
            work.push((name, p, g));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p, g) in work {
            let n = p.numel();
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if st.m.len() != n {
                return Err(Error::Internal(format!(
                    "optimizer state for '{name}' has the wrong size"
                )));
            }
            let decay = if decays(&name) {
                1.0 - c.lr * c.weight_decay
            } else {
                1.0
            };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].to_f64();
                let m = c.beta1 * st.m[i] as f64 + (1.0 - c.beta1) * gi;
                let v = c.beta2 * st.v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *x = T::from_f64(x.to_f64() * decay - c.lr * update);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, `p ← p − lr·g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Element>(&self, params: Vec<(String, &mut Tensor<T>)>, grads: &Gradients<T>) -> Result<()> {
        let mut work = Vec::with_capacity(params.len());
        for (name, p) in params {
            let g = grad_for(grads, &name, p)?;
            work.push((p, g));
        }
        for (p, g) in work {
            for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *x = T::from_f64(x.to_f64() - self.lr * gi.to_f64());
            }
        }
        Ok(())
    }
}
