//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    shape: Vec<usize>,
    /// Number of updates this parameter has received (bias correction).
    updates: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over every non-frozen parameter that has a gradient.
    ///
    /// Parameters without a gradient this step are left untouched, including
    /// their decay.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = self.config;
        for (name, grad) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; grad.numel()],
                second: vec![0.0; grad.numel()],
                shape: grad.shape().to_vec(),
                updates: 0,
            });
            if m.shape != grad.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: m.shape.clone(),
                    rhs: grad.shape().to_vec(),
                });
            }
            m.updates += 1;
            let bc1 = 1.0 - c.beta1.powi(m.updates as i32);
            let bc2 = 1.0 - c.beta2.powi(m.updates as i32);
            let decay = 1.0 - c.lr * c.weight_decay;
            for (((p, g), m1), m2) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * g;
                *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *p = *p * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
