//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{field}.learning_rate"), "must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config(format!("{field}.beta1"), "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{field}.weight_decay"), "eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Optimizer state for one contiguous parameter range.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(n: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = c.beta1 * self.m[i] as f64 + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.v[i] as f64 + (1.0 - c.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let p = params[i] as f64 * decay - c.learning_rate * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            params[i] = p as f32;
        }
    }
}
