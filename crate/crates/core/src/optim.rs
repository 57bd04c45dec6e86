//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
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
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state; moments mirror the parameter store one-to-one.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Real = f32> {
    config: AdamWConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Real> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn from_parts(config: AdamWConfig, m: Vec<Vec<S>>, v: Vec<Vec<S>>, step: u64) -> Self {
        AdamW { config, m, v, step }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Updates every trainable parameter from its gradient, then clears the
    /// gradients. Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let t = params.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter {} has no gradient",
                    params.name(id)
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, wd, eps) = (S::of(c.lr), S::of(c.weight_decay), S::of(c.eps));
        let (inv_bc1, inv_bc2) = (S::of(1.0 / bc1), S::of(1.0 / bc2));

        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
