//! The environment interface PPO trains against, with a real-simulator
//! implementation and one backed entirely by a learned self-model.

use rand::Rng as _;

use crate::envs::{hopper, Accounting, Action, EnvDescriptor, EnvId, EnvState, RealEnv};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::selfmodel::{HiddenState, SelfModel};
use crate::tasks::TaskSpec;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub reward: f64,
    /// The task ended (no bootstrapping past this state).
    pub terminated: bool,
    /// The episode hit its horizon.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Anything PPO can collect experience from. Stepping a finished episode
/// without a reset is a contract violation.
pub trait EnvLike {
    fn descriptor(&self) -> &EnvDescriptor;
    fn reset(&mut self, seed: u64) -> Result<EnvState>;
    fn step(&mut self, a: &Action) -> Result<Step>;
    /// Horizontal displacement since the last reset, where tracked.
    fn x_position(&self) -> Option<f64> {
        None
    }
}

/// Episode bookkeeping shared by both implementations.
#[derive(Debug, Clone, Default)]
struct EpisodeClock {
    t: usize,
    active: bool,
}

impl EpisodeClock {
    fn begin(&mut self) {
        self.t = 0;
        self.active = true;
    }

    fn check(&self) -> Result<()> {
        if !self.active {
            return Err(Error::Contract("step called on a finished episode; reset first".into()));
        }
        Ok(())
    }

    fn advance(&mut self, terminated: bool, horizon: usize) -> bool {
        self.t += 1;
        let truncated = !terminated && self.t >= horizon;
        if terminated || truncated {
            self.active = false;
        }
        truncated
    }
}

/// The real simulator with task rewards and the task horizon.
#[derive(Debug, Clone)]
pub struct RealTaskEnv {
    env: RealEnv,
    task: TaskSpec,
    state: Option<EnvState>,
    clock: EpisodeClock,
}

impl RealTaskEnv {
    pub fn new(env: RealEnv, task: TaskSpec) -> Result<Self> {
        if env.descriptor().env_id != task.descriptor.env_id {
            return Err(Error::Config(format!(
                "task '{}' does not run on {}",
                task.task_id,
                env.descriptor().env_id
            )));
        }
        Ok(Self {
            env,
            task,
            state: None,
            clock: EpisodeClock::default(),
        })
    }

    pub fn for_task(task: TaskSpec) -> Self {
        Self {
            env: RealEnv::new(task.descriptor.env_id),
            task,
            state: None,
            clock: EpisodeClock::default(),
        }
    }

    /// Evaluation-mode instance: its steps are charged to the evaluation tally.
    pub fn for_eval(task: TaskSpec) -> Self {
        let mut e = Self::for_task(task);
        e.env.set_accounting(Accounting::Evaluation);
        e
    }

    pub fn inner(&self) -> &RealEnv {
        &self.env
    }

    pub fn into_inner(self) -> RealEnv {
        self.env
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }
}

impl EnvLike for RealTaskEnv {
    fn descriptor(&self) -> &EnvDescriptor {
        self.env.descriptor()
    }

    fn reset(&mut self, seed: u64) -> Result<EnvState> {
        let s = self.env.reset(seed);
        self.state = Some(s.clone());
        self.clock.begin();
        Ok(s)
    }

    fn step(&mut self, a: &Action) -> Result<Step> {
        self.clock.check()?;
        let s = self.state.take().expect("active episode has a state");
        let next = self.env.step(a)?;
        let (reward, terminated) = self.task.reward(&s, a, &next);
        let truncated = self.clock.advance(terminated, self.task.horizon);
        self.state = Some(next.clone());
        Ok(Step {
            state: next,
            reward,
            terminated,
            truncated,
        })
    }

    fn x_position(&self) -> Option<f64> {
        (self.env.descriptor().env_id == EnvId::PointHopper).then(|| self.env.x_position())
    }
}

/// An environment simulated entirely by a self-model. Episodes start from
/// recorded states, the model is grounded once on that state, and every
/// later state is an open-loop prediction. No real environment is touched.
#[derive(Debug, Clone)]
pub struct ModelEnv<'m, T: Scalar = f64> {
    model: &'m SelfModel<T>,
    task: TaskSpec,
    seeds: Vec<EnvState>,
    hidden: Option<HiddenState<T>>,
    state: Option<EnvState>,
    clock: EpisodeClock,
    x: f64,
    predict_calls: u64,
}

impl<'m, T: Scalar> ModelEnv<'m, T> {
    pub fn new(model: &'m SelfModel<T>, task: TaskSpec, seeds: Vec<EnvState>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InsufficientData("model environment needs at least one seed state".into()));
        }
        if let Some(env) = model.env_id {
            if env != task.descriptor.env_id {
                return Err(Error::Config(format!("task '{}' does not match a model of {env}", task.task_id)));
            }
        }
        if model.state_dim() != task.descriptor.state_dim || model.action_dim() != task.descriptor.action_dim {
            return Err(Error::Config("model dimensions do not match the task environment".into()));
        }
        if seeds.iter().any(|s| s.len() != model.state_dim()) {
            return Err(Error::Config("seed state dimension does not match the model".into()));
        }
        Ok(Self {
            model,
            task,
            seeds,
            hidden: None,
            state: None,
            clock: EpisodeClock::default(),
            x: 0.0,
            predict_calls: 0,
        })
    }

    pub fn predict_calls(&self) -> u64 {
        self.predict_calls
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }
}

impl<T: Scalar> EnvLike for ModelEnv<'_, T> {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.task.descriptor
    }

    fn reset(&mut self, seed: u64) -> Result<EnvState> {
        let idx = rng::stream(seed, "model_env.reset").random_range(0..self.seeds.len());
        let s0 = self.seeds[idx].clone();
        let (h, _) = self.model.correct(None, &s0)?;
        self.hidden = Some(h);
        self.state = Some(s0.clone());
        self.clock.begin();
        self.x = 0.0;
        Ok(s0)
    }

    fn step(&mut self, a: &Action) -> Result<Step> {
        self.clock.check()?;
        let h = self.hidden.take().expect("active episode has a hidden state");
        let s = self.state.take().expect("active episode has a state");
        let (h_next, s_hat) = self.model.predict(&h, a)?;
        self.predict_calls += 1;
        if s_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("self-model predicted a non-finite state".into()));
        }
        if self.task.descriptor.env_id == EnvId::PointHopper {
            self.x += self.task.descriptor.dt * s_hat[hopper::X_DOT];
        }
        let (reward, terminated) = self.task.reward(&s, a, &s_hat);
        let truncated = self.clock.advance(terminated, self.task.horizon);
        self.hidden = Some(h_next);
        self.state = Some(s_hat.clone());
        Ok(Step {
            state: s_hat,
            reward,
            terminated,
            truncated,
        })
    }

    fn x_position(&self) -> Option<f64> {
        (self.task.descriptor.env_id == EnvId::PointHopper).then_some(self.x)
    }
}
