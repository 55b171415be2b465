use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore};

/// Adam hyperparameters. Defaults: `alpha = 1e-4`, `beta1 = 0.9`,
/// `beta2 = 0.98`, `epsilon = 1e-9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds state from saved moments, e.g. when resuming training.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one bias-corrected update using the gradients stored on the
    /// parameters.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumericsError> {
        if params.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![self.m.len()],
            });
        }
        for ((t, m), v) in params.tensors().zip(&self.m).zip(&self.v) {
            if t.numel() != m.len() || t.numel() != v.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = t.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= alpha * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
