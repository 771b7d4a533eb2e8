use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-score statistics. Actions live in `[-1, 1]` already, so
/// their statistics are the identity (mean 0, std 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    pub fn from_states<'a>(state_dim: usize, action_dim: usize, states: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; state_dim];
        let rows: Vec<&[f64]> = states.collect();
        for s in &rows {
            for (acc, v) in sum.iter_mut().zip(s.iter()) {
                *acc += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientData("normalization needs at least one state".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; state_dim];
        for s in &rows {
            for ((acc, v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self {
            state_mean: mean,
            state_std: std,
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }
}
