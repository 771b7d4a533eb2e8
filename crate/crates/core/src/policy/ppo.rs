//! Rollout collection, generalized advantage estimation, the clipped PPO
//! update, the training loop and deterministic evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::env::EnvLike;
use super::{Policy, PpoConfig, ValueFn};
use crate::envs::{hopper, EnvId, EnvState};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Tape, Tensor};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tasks::TaskId;

/// Parallel per-step arrays from rollout collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Row-major `[len, state_dim]`.
    pub states: Vec<f64>,
    /// Pre-squash Gaussian samples, row-major `[len, action_dim]`.
    pub pre_squash: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, s: &[f64], u: &[f64], log_prob: f64, reward: f64, value: f64, done: bool) {
        self.states.extend_from_slice(s);
        self.pre_squash.extend_from_slice(u);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    /// Fills `advantages` and `returns`; `last_value` bootstraps the step
    /// after the final one when it is not terminal.
    pub fn finish(&mut self, gamma: f64, lambda: f64, last_value: f64) -> Result<()> {
        let (adv, ret) = gae(&self.rewards, &self.values, &self.dones, gamma, lambda, last_value)?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// `δ_t = r_t + γ v_{t+1} (1 - done_t) - v_t`,
/// `A_t = δ_t + γ λ (1 - done_t) A_{t+1}`, `returns = A + v`, where
/// `v_T = last_value`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    last_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape {
            op: "gae",
            detail: format!("{n} rewards, {} values, {} done flags", values.len(), dones.len()),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Standardizes to mean 0 and (population) standard deviation 1. A
/// constant batch is only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub first_minibatch_clip_fraction: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub epochs_completed: usize,
    pub minibatches: usize,
    pub early_stopped: bool,
}

fn gather<T: Scalar>(src: &[f64], width: usize, idx: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend(src[i * width..(i + 1) * width].iter().map(|&v| T::of(v)));
    }
    Tensor::matrix(idx.len(), width, data)
}

/// Optimizer state for one actor-critic pair.
#[derive(Debug, Clone)]
pub struct PpoOptimizers<T = f64> {
    pub policy: AdamState<T>,
    pub value: AdamState<T>,
}

impl<T: Scalar> PpoOptimizers<T> {
    pub fn new(policy: &Policy<T>, value: &ValueFn<T>) -> Self {
        Self {
            policy: AdamState::new(&policy.params),
            value: AdamState::new(&value.params),
        }
    }
}

/// Diagnostics from one policy minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchStats {
    /// Clipped-surrogate loss (negated objective) minus the entropy bonus.
    pub loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// Clipped-surrogate policy loss (to minimize) on one minibatch.
/// `old_log_probs` are Gaussian log-densities of the stored pre-squash
/// samples under the behaviour policy. Gradients are added to the policy
/// store.
pub fn policy_minibatch<T: Scalar>(
    policy: &mut Policy<T>,
    states: &Tensor<T>,
    pre_squash: &Tensor<T>,
    old_log_probs: &[T],
    advantages: &[T],
    clip: f64,
    entropy_coef: f64,
) -> Result<MinibatchStats> {
    let mut tape = Tape::new(&policy.params);
    let x = tape.constant(states.clone());
    let mean = tape.mlp(&policy.params, &policy.net, x)?;
    let logp = tape.gaussian_log_prob(&policy.params, mean, policy.log_std, pre_squash)?;
    let surrogate = tape.clipped_surrogate(logp, old_log_probs, advantages, T::of(clip))?;
    let entropy = tape.gaussian_entropy(&policy.params, policy.log_std);
    let loss = tape.weighted_sum(&[(surrogate, T::one()), (entropy, T::of(-entropy_coef))])?;
    let new_lp = tape.value(logp).data();
    let n = old_log_probs.len() as f64;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for (&new, &old) in new_lp.iter().zip(old_log_probs) {
        let log_ratio = (new - old).as_f64();
        if (log_ratio.exp() - 1.0).abs() > clip {
            clipped += 1;
        }
        // Low-variance estimator of KL(old || new).
        kl += log_ratio.exp() - 1.0 - log_ratio;
    }
    let loss_v = tape.scalar(loss).as_f64();
    let ent_v = tape.scalar(entropy).as_f64();
    tape.backward(&mut policy.params, loss)?;
    Ok(MinibatchStats {
        loss: loss_v,
        clip_fraction: clipped as f64 / n,
        approx_kl: kl / n,
        entropy: ent_v,
    })
}

/// Runs `cfg.epochs` passes of minibatch updates over `buffer`, stopping
/// early once the approximate KL of a minibatch exceeds `cfg.target_kl`.
pub fn ppo_update<T: Scalar>(
    policy: &mut Policy<T>,
    value: &mut ValueFn<T>,
    opt: &mut PpoOptimizers<T>,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let n = buffer.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    if buffer.advantages.len() != n || buffer.returns.len() != n {
        return Err(Error::Contract("advantages must be computed before the update".into()));
    }
    let mut adv = buffer.advantages.clone();
    normalize_advantages(&mut adv);
    value.observe_returns(&buffer.returns);
    let targets: Vec<f64> = buffer.returns.iter().map(|&r| value.scale_target(r)).collect();

    let pi_cfg = AdamConfig {
        lr: cfg.lr_policy,
        ..AdamConfig::default()
    };
    let v_cfg = AdamConfig {
        lr: cfg.lr_value,
        ..AdamConfig::default()
    };
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut sum_pl, mut sum_vl, mut sum_cf, mut sum_kl, mut sum_ent) = (0.0, 0.0, 0.0, 0.0, 0.0);
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let states = gather::<T>(&buffer.states, buffer.state_dim, idx)?;
            let u = gather::<T>(&buffer.pre_squash, buffer.action_dim, idx)?;
            let old: Vec<T> = idx.iter().map(|&i| T::of(gaussian_part(buffer, i))).collect();
            let a: Vec<T> = idx.iter().map(|&i| T::of(adv[i])).collect();
            let mb = policy_minibatch(policy, &states, &u, &old, &a, cfg.clip, cfg.entropy_coef)?;
            let (pl, cf, kl, ent) = (mb.loss, mb.clip_fraction, mb.approx_kl, mb.entropy);
            if !pl.is_finite() {
                return Err(Error::Diverged(format!(
                    "policy loss became {pl} after {} minibatches (kl {kl}, clip fraction {cf})",
                    stats.minibatches
                )));
            }
            if stats.minibatches == 0 {
                stats.first_minibatch_clip_fraction = cf;
            }
            policy.params.clip_grad_norm(T::of(cfg.max_grad_norm));
            opt.policy.step(&mut policy.params, &pi_cfg)?;
            policy.clamp_log_std();

            let mut tape = Tape::new(&value.params);
            let x = tape.constant(states);
            let v = tape.mlp(&value.params, &value.net, x)?;
            let t = Tensor::vector(idx.iter().map(|&i| T::of(targets[i])).collect());
            let vl = tape.mse(v, &t)?;
            let vl_v = tape.scalar(vl).as_f64();
            if !vl_v.is_finite() {
                return Err(Error::Diverged(format!("value loss became {vl_v}")));
            }
            tape.backward(&mut value.params, vl)?;
            value.params.clip_grad_norm(T::of(cfg.max_grad_norm));
            opt.value.step(&mut value.params, &v_cfg)?;

            stats.minibatches += 1;
            sum_pl += pl;
            sum_vl += vl_v;
            sum_cf += cf;
            sum_kl += kl;
            sum_ent += ent;
            if kl > cfg.target_kl {
                stats.early_stopped = true;
                break 'epochs;
            }
        }
        stats.epochs_completed += 1;
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss = sum_pl / m;
    stats.value_loss = sum_vl / m;
    stats.clip_fraction = sum_cf / m;
    stats.approx_kl = sum_kl / m;
    stats.entropy = sum_ent / m;
    Ok(stats)
}

/// The Gaussian part of a stored log-probability. The tanh correction
/// depends only on the stored sample, so it cancels in the ratio.
pub fn gaussian_part(buffer: &RolloutBuffer, i: usize) -> f64 {
    let u = &buffer.pre_squash[i * buffer.action_dim..(i + 1) * buffer.action_dim];
    let correction: f64 = u.iter().map(|v| (1.0 - v.tanh().powi(2) + super::SQUASH_EPS).ln()).sum();
    buffer.log_probs[i] + correction
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub returns: Vec<f64>,
    pub return_mean: f64,
    pub return_std: f64,
    /// Per-episode maximum height (point_hopper only).
    pub max_z: Vec<f64>,
    pub max_z_mean: Option<f64>,
    /// Per-episode horizontal displacement, where the environment tracks it.
    pub displacements: Vec<f64>,
    pub displacement_mean: Option<f64>,
    pub lengths: Vec<usize>,
    /// Mean `cos θ` of each episode's final state (pendulum only).
    pub final_cos_mean: Option<f64>,
}

impl EvalStats {
    /// Task-specific auxiliary metric used in learning curves.
    pub fn aux_metric(&self, task: TaskId) -> f64 {
        match task {
            TaskId::Forward => self.displacement_mean.unwrap_or(0.0),
            TaskId::Jump => self.max_z_mean.unwrap_or(0.0),
            TaskId::PendulumUpright => self.final_cos_mean.unwrap_or(0.0),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Plays one deterministic (mean-action) episode and returns every state
/// visited, starting with the reset state.
pub fn rollout_trace<T: Scalar>(env: &mut dyn EnvLike, policy: &Policy<T>, seed: u64) -> Result<(Vec<EnvState>, f64)> {
    let mut s = env.reset(seed)?;
    let mut states = vec![s.clone()];
    let mut ret = 0.0;
    loop {
        let a = policy.act_mean(&s)?;
        let step = env.step(&a)?;
        ret += step.reward;
        states.push(step.state.clone());
        let done = step.done();
        s = step.state;
        if done {
            break;
        }
    }
    Ok((states, ret))
}

/// Deterministic-mean-action evaluation over `episodes` seeded resets.
pub fn eval_policy<T: Scalar>(env: &mut dyn EnvLike, policy: &Policy<T>, episodes: usize, seed: u64) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let env_id = env.descriptor().env_id;
    let mut seeds = rng::stream(seed, "eval.reset");
    let mut stats = EvalStats {
        episodes,
        returns: Vec::with_capacity(episodes),
        return_mean: 0.0,
        return_std: 0.0,
        max_z: Vec::new(),
        max_z_mean: None,
        displacements: Vec::new(),
        displacement_mean: None,
        lengths: Vec::with_capacity(episodes),
        final_cos_mean: None,
    };
    let mut final_cos = Vec::new();
    for _ in 0..episodes {
        let (states, ret) = rollout_trace(env, policy, seeds.random())?;
        stats.returns.push(ret);
        stats.lengths.push(states.len() - 1);
        match env_id {
            EnvId::PointHopper => {
                stats.max_z.push(states.iter().map(|s| s[hopper::Z]).fold(f64::NEG_INFINITY, f64::max));
            }
            EnvId::Pendulum => final_cos.push(states.last().expect("non-empty trace")[0]),
            EnvId::Cartpole => {}
        }
        if let Some(x) = env.x_position() {
            stats.displacements.push(x);
        }
    }
    (stats.return_mean, stats.return_std) = mean_std(&stats.returns);
    if !stats.max_z.is_empty() {
        stats.max_z_mean = Some(mean_std(&stats.max_z).0);
    }
    if !stats.displacements.is_empty() {
        stats.displacement_mean = Some(mean_std(&stats.displacements).0);
    }
    if !final_cos.is_empty() {
        stats.final_cos_mean = Some(mean_std(&final_cos).0);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cumulative_env_steps: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub aux_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cumulative_env_steps,eval_return_mean,eval_return_std,aux_metric")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{}",
                p.cumulative_env_steps, p.eval_return_mean, p.eval_return_std, p.aux_metric
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PpoOutcome<T: Scalar = f64> {
    pub policy: Policy<T>,
    pub value: ValueFn<T>,
    pub curve: LearningCurve,
    pub updates: Vec<UpdateStats>,
    /// Steps taken in the training environment.
    pub env_steps: usize,
}

/// Evaluation hook for learning curves: the environment to evaluate in
/// and the task whose auxiliary metric is recorded.
pub struct CurveEval<'e> {
    pub env: &'e mut dyn EnvLike,
    pub task: TaskId,
}

/// Alternates rollout collection and [`ppo_update`] until exactly
/// `cfg.total_steps` training-environment steps have been taken. With an
/// evaluation hook, the deterministic policy is evaluated before training,
/// every `cfg.eval_interval` steps and at the end.
pub fn ppo_train<T: Scalar>(
    env: &mut dyn EnvLike,
    mut curve_eval: Option<CurveEval<'_>>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<PpoOutcome<T>> {
    cfg.validate()?;
    let desc = env.descriptor().clone();
    let mut policy = Policy::<T>::new(desc.state_dim, desc.action_dim, &cfg.hidden_sizes, seed)?;
    let mut value = ValueFn::<T>::new(desc.state_dim, &cfg.hidden_sizes, seed)?;
    let mut opt = PpoOptimizers::new(&policy, &value);
    let mut sample_rng = rng::stream(seed, "ppo.sample");
    let mut reset_rng = rng::stream(seed, "ppo.reset");
    let mut shuffle_rng = rng::stream(seed, "ppo.shuffle");
    let eval_seed = rng::derive_seed(seed, "ppo.eval");

    let mut curve = LearningCurve::default();
    let mut record = |policy: &Policy<T>, steps: usize, curve: &mut LearningCurve| -> Result<()> {
        if let Some(ce) = curve_eval.as_mut() {
            let st = eval_policy(ce.env, policy, cfg.curve_eval_episodes.max(1), eval_seed)?;
            curve.points.push(CurvePoint {
                cumulative_env_steps: steps,
                eval_return_mean: st.return_mean,
                eval_return_std: st.return_std,
                aux_metric: st.aux_metric(ce.task),
            });
        }
        Ok(())
    };
    record(&policy, 0, &mut curve)?;

    let mut updates = Vec::new();
    let mut steps = 0usize;
    let mut next_eval = cfg.eval_interval;
    let mut state: Option<EnvState> = None;
    while steps < cfg.total_steps {
        let batch = cfg.steps_per_batch.min(cfg.total_steps - steps);
        let mut buf = RolloutBuffer::new(desc.state_dim, desc.action_dim);
        for _ in 0..batch {
            let s = match state.take() {
                Some(s) => s,
                None => env.reset(reset_rng.random())?,
            };
            let (a, u, logp) = policy.act(&s, &mut sample_rng)?;
            let v = value.value(&s)?;
            let step = env.step(&a)?;
            let mut reward = step.reward;
            if step.truncated && !step.terminated {
                // Time-limit truncation: bootstrap from the state reached.
                reward += cfg.gamma * value.value(&step.state)?;
            }
            buf.push(&s, &u, logp, reward, v, step.done());
            if !step.done() {
                state = Some(step.state);
            }
        }
        steps += batch;
        let last_value = match &state {
            Some(s) => value.value(s)?,
            None => 0.0,
        };
        buf.finish(cfg.gamma, cfg.lambda, last_value)?;
        let st = ppo_update(&mut policy, &mut value, &mut opt, &buf, cfg, &mut shuffle_rng)?;
        log::debug!(
            "ppo {steps}/{}: pl {:.4} vl {:.4} kl {:.4} clip {:.3}",
            cfg.total_steps,
            st.policy_loss,
            st.value_loss,
            st.approx_kl,
            st.clip_fraction
        );
        updates.push(st);
        if cfg.eval_interval > 0 && steps >= next_eval && steps < cfg.total_steps {
            record(&policy, steps, &mut curve)?;
            while next_eval <= steps {
                next_eval += cfg.eval_interval;
            }
        }
    }
    if steps > 0 {
        record(&policy, steps, &mut curve)?;
    }
    Ok(PpoOutcome {
        policy,
        value,
        curve,
        updates,
        env_steps: steps,
    })
}
