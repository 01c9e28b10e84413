//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            lr: 1e-5,
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
            && self.lr.is_finite()
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

/// What a call to [`AdamW::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; no parameter moved.
    Skipped,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state. Moment buffers are keyed by parameter path, so the
/// same optimizer keeps working after a module is cloned or reloaded.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
    skipped: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
            skipped: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of steps aborted because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Frozen parameters are never touched.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<StepOutcome> {
        let mut finite = true;
        module.visit_params("", &mut |_, p| {
            if !p.is_frozen() && !p.grad().all_finite() {
                finite = false;
            }
        });
        if !finite {
            self.skipped += 1;
            log::warn!("non-finite gradient; step skipped ({} so far)", self.skipped);
            return Ok(StepOutcome::Skipped);
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let moments = &mut self.moments;
        let mut mismatch = None;
        module.visit_params_mut("", &mut |name, p| {
            if p.is_frozen() {
                return;
            }
            let n = p.value().len();
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if state.m.len() != n {
                mismatch = Some(name.to_string());
                return;
            }
            let g = p.grad().data().to_vec();
            let w = p.value_mut().data_mut();
            for i in 0..n {
                state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
                state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                w[i] = w[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
        match mismatch {
            Some(name) => Err(Error::Config(format!("optimizer state shape differs for {name}"))),
            None => Ok(StepOutcome::Applied),
        }
    }
}
