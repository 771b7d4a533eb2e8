use crate::envs::{env_reset, env_step_tracked, Action, EnvDescriptor, EnvId, EnvState};
use crate::error::{Error, Result};

/// Which tally a real-environment step is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accounting {
    /// Transitions that feed learning (data collection or on-policy training).
    Training,
    /// Evaluation rollouts, reported separately from the data budget.
    Evaluation,
}

/// A live environment instance that counts every transition it produces.
#[derive(Debug, Clone)]
pub struct RealEnv {
    desc: EnvDescriptor,
    state: Option<EnvState>,
    x: f64,
    mode: Accounting,
    training_steps: u64,
    eval_steps: u64,
}

impl RealEnv {
    pub fn new(env_id: EnvId) -> Self {
        Self {
            desc: env_id.descriptor(),
            state: None,
            x: 0.0,
            mode: Accounting::Training,
            training_steps: 0,
            eval_steps: 0,
        }
    }

    pub fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    pub fn set_accounting(&mut self, mode: Accounting) {
        self.mode = mode;
    }

    pub fn accounting(&self) -> Accounting {
        self.mode
    }

    pub fn training_steps(&self) -> u64 {
        self.training_steps
    }

    pub fn eval_steps(&self) -> u64 {
        self.eval_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.training_steps + self.eval_steps
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Horizontal position accumulated since the last reset.
    pub fn x_position(&self) -> f64 {
        self.x
    }

    pub fn reset(&mut self, seed: u64) -> EnvState {
        let s = env_reset(&self.desc, seed);
        self.state = Some(s.clone());
        self.x = 0.0;
        s
    }

    pub fn step(&mut self, a: &Action) -> Result<EnvState> {
        let s = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Contract("step called before reset".into()))?;
        let (next, dx) = env_step_tracked(&self.desc, s, a)?;
        self.x += dx;
        match self.mode {
            Accounting::Training => self.training_steps += 1,
            Accounting::Evaluation => self.eval_steps += 1,
        }
        self.state = Some(next.clone());
        Ok(next)
    }
}
