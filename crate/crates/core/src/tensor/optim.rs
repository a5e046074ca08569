use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied directly to the weights.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters and gradients pair up by position and
    /// must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid("parameter set changed between optimizer steps"));
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Epoch-wise cosine annealing between `lr_max` and `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 || !(lr_min >= 0.0) || !(lr_max >= lr_min) {
            return Err(Error::invalid(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max and epochs > 0, got {lr_min}, {lr_max}, {total_epochs}"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_epochs,
        })
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} beyond schedule of {}",
                self.total_epochs
            )));
        }
        let phase = std::f64::consts::PI * epoch as f64 / self.total_epochs as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos()))
    }
}
