use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Multipliers applied from their epoch onwards.
    pub schedule: Vec<Milestone>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![
                Milestone {
                    epoch: 15,
                    factor: 0.1,
                },
                Milestone {
                    epoch: 23,
                    factor: 0.1,
                },
            ],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(invalid_arg!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_arg!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(invalid_arg!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.schedule.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(invalid_arg!("schedule epochs must be strictly increasing"));
        }
        if self.schedule.iter().any(|m| !m.factor.is_finite() || m.factor <= 0.0) {
            return Err(invalid_arg!("schedule factors must be positive"));
        }
        Ok(())
    }
}

/// Base rate times every milestone factor whose epoch is `<= epoch`.
pub fn lr_at(epoch: usize, cfg: &SgdConfig) -> f32 {
    cfg.schedule
        .iter()
        .filter(|m| m.epoch <= epoch)
        .fold(cfg.lr, |lr, m| lr * m.factor)
}

/// One velocity buffer per parameter plus a step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
    pub steps: usize,
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(params: Vec<&mut Tensor>, grads: &[Tensor], state: &mut SgdState, cfg: &SgdConfig, lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(shape_err!("optimizer holds {} buffers for {} parameters", state.velocity.len(), params.len()));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(shape_err!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    state.steps += 1;
    Ok(())
}
