//! Proximal policy optimization over any [`EnvLike`] environment: the real
//! simulator or the learned self-model.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, EnvState};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Mlp, ParamId, ParamStore, ParamStoreBuilder, Tensor};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

mod env;
mod io;
mod ppo;

pub use env::{EnvLike, ModelEnv, RealTaskEnv, Step};
pub use io::{PolicyCheckpoint, SMP_MAGIC};
pub use ppo::{
    eval_policy, gae, gaussian_part, normalize_advantages, policy_minibatch, MinibatchStats, ppo_train, ppo_update, rollout_trace, CurveEval, CurvePoint, EvalStats,
    LearningCurve, PpoOptimizers, PpoOutcome, RolloutBuffer, UpdateStats,
};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the tanh log-determinant finite as `|a| -> 1`.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub steps_per_batch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub entropy_coef: f64,
    /// Total environment steps consumed by rollout collection.
    pub total_steps: usize,
    pub horizon: usize,
    /// Updates stop for the batch once approximate KL exceeds this.
    pub target_kl: f64,
    pub max_grad_norm: f64,
    pub hidden_sizes: Vec<usize>,
    /// Environment steps between learning-curve evaluations (0 = only at
    /// the start and the end).
    pub eval_interval: usize,
    pub curve_eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatch_size: 64,
            steps_per_batch: 2048,
            lr_policy: 3e-4,
            lr_value: 3e-4,
            entropy_coef: 0.0,
            total_steps: 100_000,
            horizon: 200,
            target_kl: 0.03,
            max_grad_norm: 0.5,
            hidden_sizes: vec![64, 64],
            eval_interval: 10_240,
            curve_eval_episodes: 5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.steps_per_batch == 0 || self.horizon == 0 {
            return bad("epochs, minibatch_size, steps_per_batch and horizon must be at least 1");
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must list at least one non-zero layer width");
        }
        Ok(())
    }
}

/// Tanh-squashed diagonal Gaussian policy with a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T: Scalar = f64> {
    pub(crate) params: ParamStore<T>,
    pub(crate) net: Mlp,
    pub(crate) log_std: ParamId,
    state_dim: usize,
    action_dim: usize,
}

/// State-value critic. The network predicts standardized returns; the
/// running return statistics map its output back to return units.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFn<T: Scalar = f64> {
    pub(crate) params: ParamStore<T>,
    pub(crate) net: Mlp,
    pub(crate) returns: ReturnStats,
}

/// Running mean and variance of every return target seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub count: f64,
    pub mean: f64,
    pub m2: f64,
}

/// Lower bound on the return scale, so near-constant returns stay finite.
const RETURN_STD_FLOOR: f64 = 1e-2;

impl Default for ReturnStats {
    fn default() -> Self {
        Self {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }
}

impl ReturnStats {
    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            return 1.0;
        }
        (self.m2 / self.count).sqrt().max(RETURN_STD_FLOOR)
    }

    /// Chan et al. parallel update with a whole batch.
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.m2 += m2 + delta * delta * self.count * n / total;
        self.count = total;
    }
}

fn layer_sizes(inp: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut sizes = vec![inp];
    sizes.extend_from_slice(hidden);
    sizes.push(out);
    sizes
}

fn row<T: Scalar>(s: &[f64]) -> Tensor<T> {
    Tensor::vector(s.iter().map(|&v| T::of(v)).collect())
}

impl<T: Scalar> Policy<T> {
    /// The mean head starts scaled by 0.01 so an untrained policy acts
    /// close to zero; log-std starts at 0.
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "policy.init");
        let mut b = ParamStoreBuilder::new();
        Mlp::declare(&mut b, "pi", &layer_sizes(state_dim, hidden, action_dim), 0.01, &mut r);
        b.add_zeros("pi.log_std", &[action_dim]);
        Self::from_params(b.build()?, hidden.len() + 1)
    }

    pub(crate) fn from_params(params: ParamStore<T>, depth: usize) -> Result<Self> {
        let net = Mlp::bind(&params, "pi", depth)?;
        let log_std = params.id("pi.log_std")?;
        let action_dim = net.out();
        if params.value(log_std).len() != action_dim {
            return Err(shape_err("policy", "log_std length differs from the action dimension"));
        }
        Ok(Self {
            state_dim: net.inp(),
            action_dim,
            params,
            net,
            log_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.params.value(self.log_std).data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn set_log_std(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.action_dim {
            return Err(shape_err("policy", "log_std length differs from the action dimension"));
        }
        let t = self.params.value_mut(self.log_std);
        for (d, &v) in t.data_mut().iter_mut().zip(values) {
            *d = T::of(v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        }
        Ok(())
    }

    pub(crate) fn clamp_log_std(&mut self) {
        let t = self.params.value_mut(self.log_std);
        for v in t.data_mut() {
            *v = v.max(T::of(LOG_STD_MIN)).min(T::of(LOG_STD_MAX));
        }
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(shape_err("policy", format!("state has {} dims, policy expects {}", s.len(), self.state_dim)));
        }
        Ok(())
    }

    /// Pre-squash Gaussian mean.
    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s)?;
        let out = self.net.forward(&self.params, &row(s))?;
        Ok(out.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Deterministic evaluation action `tanh(mean(s))`.
    pub fn act_mean(&self, s: &EnvState) -> Result<Action> {
        Ok(Action(self.mean(s)?.into_iter().map(f64::tanh).collect()))
    }

    /// Log-density of the squashed action `tanh(u)` given its pre-squash
    /// sample `u`.
    pub fn log_prob(&self, s: &[f64], u: &[f64]) -> Result<f64> {
        let mean = self.mean(s)?;
        Ok(squashed_log_prob(&mean, &self.log_std(), u))
    }

    /// Samples `u ~ N(mean(s), exp(log_std)^2)`; returns `(tanh(u), u, log p)`.
    pub fn act(&self, s: &EnvState, rng: &mut Rng) -> Result<(Action, Vec<f64>, f64)> {
        let mean = self.mean(s)?;
        let log_std = self.log_std();
        let u: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(&m, &l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logp = squashed_log_prob(&mean, &log_std, &u);
        Ok((Action(u.iter().map(|v| v.tanh()).collect()), u, logp))
    }
}

/// Gaussian log-density of `u` plus the tanh change-of-variables term.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(u)
        .map(|((&m, &l), &u)| {
            let z = (u - m) / l.exp();
            let t = u.tanh();
            -0.5 * z * z - l - half_ln_2pi - (1.0 - t * t + SQUASH_EPS).ln()
        })
        .sum()
}

impl<T: Scalar> ValueFn<T> {
    pub fn new(state_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "value.init");
        let mut b = ParamStoreBuilder::new();
        Mlp::declare(&mut b, "v", &layer_sizes(state_dim, hidden, 1), 1.0, &mut r);
        Self::from_params(b.build()?, hidden.len() + 1)
    }

    pub(crate) fn from_params(params: ParamStore<T>, depth: usize) -> Result<Self> {
        let net = Mlp::bind(&params, "v", depth)?;
        if net.out() != 1 {
            return Err(shape_err("value", "critic must have a scalar output"));
        }
        Ok(Self {
            params,
            net,
            returns: ReturnStats::default(),
        })
    }

    pub fn return_stats(&self) -> ReturnStats {
        self.returns
    }

    pub(crate) fn observe_returns(&mut self, returns: &[f64]) {
        self.returns.update(returns);
    }

    pub(crate) fn scale_target(&self, ret: f64) -> f64 {
        (ret - self.returns.mean) / self.returns.std()
    }

    pub fn state_dim(&self) -> usize {
        self.net.inp()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.state_dim() {
            return Err(shape_err("value", "state dimension mismatch"));
        }
        let raw = self.net.forward(&self.params, &row(s))?.data()[0].as_f64();
        Ok(raw * self.returns.std() + self.returns.mean)
    }
}

#[cfg(test)]
mod tests;
