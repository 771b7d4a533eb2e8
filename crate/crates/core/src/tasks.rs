//! Task reward functions and termination rules. They read only the state
//! vectors they are given, so the same task scores real and predicted
//! trajectories identically.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{angle_of, denormalize_action, hopper, EnvDescriptor, EnvId};
use crate::error::{Error, Result};

/// Height at which a jump episode terminates.
pub const DEFAULT_Z_TERM: f64 = 1.0;
pub const DEFAULT_HORIZON: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Forward,
    Jump,
    #[serde(alias = "pendulum")]
    PendulumUpright,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Forward => "forward",
            TaskId::Jump => "jump",
            TaskId::PendulumUpright => "pendulum",
        }
    }

    /// The environment this task is defined on.
    pub fn env(self) -> EnvId {
        match self {
            TaskId::Forward | TaskId::Jump => EnvId::PointHopper,
            TaskId::PendulumUpright => EnvId::Pendulum,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "walk" => Ok(TaskId::Forward),
            "jump" => Ok(TaskId::Jump),
            "pendulum" | "pendulum_upright" => Ok(TaskId::PendulumUpright),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected forward, jump or pendulum)"
            ))),
        }
    }
}

/// A task bound to a compatible environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub horizon: usize,
    pub z_term: f64,
    pub descriptor: EnvDescriptor,
}

impl TaskSpec {
    pub fn new(task_id: TaskId, env: EnvId) -> Result<Self> {
        Self::with_params(task_id, env, DEFAULT_HORIZON, DEFAULT_Z_TERM)
    }

    pub fn with_params(task_id: TaskId, env: EnvId, horizon: usize, z_term: f64) -> Result<Self> {
        if task_id.env() != env {
            return Err(Error::Config(format!(
                "task '{task_id}' needs the {} environment, not {env}",
                task_id.env()
            )));
        }
        if horizon == 0 {
            return Err(Error::Config("task horizon must be at least 1".into()));
        }
        if task_id == TaskId::Jump && !(z_term > 0.0) {
            return Err(Error::Config("jump z_term must be positive".into()));
        }
        Ok(Self {
            task_id,
            horizon,
            z_term,
            descriptor: env.descriptor(),
        })
    }

    /// Reward for the transition `s --a--> s_next` and whether the task
    /// terminates there. `a` is the normalized action.
    pub fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> (f64, bool) {
        match self.task_id {
            TaskId::Forward => (reward_forward(s, s_next), false),
            TaskId::Jump => reward_jump(s, s_next, self.z_term),
            TaskId::PendulumUpright => {
                let torque = denormalize_action(&self.descriptor, a)[0];
                (reward_pendulum_upright(s, s_next, torque), false)
            }
        }
    }
}

/// Horizontal velocity of `s_next`.
pub fn reward_forward(_s: &[f64], s_next: &[f64]) -> f64 {
    s_next[hopper::X_DOT]
}

/// Vertical velocity of `s_next`; done once its height reaches `z_term`.
pub fn reward_jump(_s: &[f64], s_next: &[f64], z_term: f64) -> (f64, bool) {
    (s_next[hopper::Z_DOT], s_next[hopper::Z] >= z_term)
}

/// `-(θ² + 0.1 θ̇² + 0.001 τ²)` for the state reached, with `θ ∈ [-π, π]`
/// recovered from `(cos θ, sin θ)` and `τ` the native torque.
pub fn reward_pendulum_upright(_s: &[f64], s_next: &[f64], torque: f64) -> f64 {
    let theta = angle_of(s_next[0], s_next[1]);
    let theta_dot = s_next[2];
    -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvState, RealEnv};
    use crate::envs::Action;
    use std::f64::consts::PI;

    #[test]
    fn forward_examples() {
        assert_eq!(reward_forward(&[0.0; 4], &[0.0, 2.0, 0.0, 1.0]), 2.0);
        assert_eq!(reward_forward(&[0.0; 4], &[0.3, 0.0, 0.0, 0.0]), 0.0);
        let ret: f64 = (0..200).map(|_| reward_forward(&[0.0; 4], &[0.0, 1.0, 0.0, 1.0])).sum();
        assert_eq!(ret, 200.0);
        assert!((ret * hopper::DT - 10.0).abs() < 1e-12);
    }

    #[test]
    fn jump_examples() {
        assert_eq!(reward_jump(&[0.0; 4], &[0.3, 0.0, 1.5, 0.0], 1.0), (1.5, false));
        assert!(reward_jump(&[0.0; 4], &[1.2, 0.0, 0.0, 0.0], 1.0).1);
        assert_eq!(reward_jump(&[0.0; 4], &[0.0, 0.0, 0.0, 1.0], 1.0).0, 0.0);
        for z in [0.0, 0.5, 0.999_999] {
            assert!(!reward_jump(&[0.0; 4], &[z, 0.0, 0.0, 0.0], 1.0).1);
        }
    }

    #[test]
    fn pendulum_examples() {
        assert_eq!(reward_pendulum_upright(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 0.0), 0.0);
        let down = reward_pendulum_upright(&[0.0; 3], &[-1.0, 0.0, 0.0], 0.0);
        assert!((down + PI * PI).abs() < 1e-12);
        let (th, thd, tau): (f64, f64, f64) = (0.7, -2.5, 1.2);
        let r = reward_pendulum_upright(&[0.0; 3], &[th.cos(), th.sin(), thd], tau);
        assert!((r + (0.49 + 0.1 * 6.25 + 0.001 * 1.44)).abs() < 1e-12);
        let spec = TaskSpec::new(TaskId::PendulumUpright, EnvId::Pendulum).unwrap();
        // Normalized action 0.5 is 1 N·m of torque.
        let (r, done) = spec.reward(&[0.0; 3], &[0.5], &[1.0, 0.0, 0.0]);
        assert!((r + 0.001).abs() < 1e-15);
        assert!(!done);
    }

    #[test]
    fn mismatched_env_is_a_config_error() {
        assert!(matches!(TaskSpec::new(TaskId::Jump, EnvId::Pendulum), Err(Error::Config(_))));
        assert!(matches!(TaskSpec::new(TaskId::PendulumUpright, EnvId::PointHopper), Err(Error::Config(_))));
        assert!(TaskSpec::with_params(TaskId::Jump, EnvId::PointHopper, 0, 1.0).is_err());
        assert!(TaskSpec::with_params(TaskId::Jump, EnvId::PointHopper, 10, 0.0).is_err());
        assert!("swim".parse::<TaskId>().is_err());
        assert_eq!("pendulum".parse::<TaskId>().unwrap(), TaskId::PendulumUpright);
    }

    #[test]
    fn forward_return_is_displacement_over_dt() {
        let mut env = RealEnv::new(EnvId::PointHopper);
        let mut s: EnvState = env.reset(4);
        let mut ret = 0.0;
        for i in 0..200 {
            let a = Action(vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]);
            let next = env.step(&a).unwrap();
            ret += reward_forward(&s, &next);
            s = next;
        }
        let disp = env.x_position();
        assert!((ret * hopper::DT - disp).abs() < 1e-9, "{ret} vs {disp}");
    }
}
