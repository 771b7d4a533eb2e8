//! Experiment orchestration: the self-model pipeline, the model-free
//! baseline, budget sweeps, zero-shot task transfer, data-reduction factors
//! and report emission.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{collect_random_in, holdout, Dataset, DEFAULT_EPISODE_LEN};
use crate::envs::{hopper, Accounting, EnvId, RealEnv};
use crate::error::{Error, Result};
use crate::policy::{
    eval_policy, ppo_train, rollout_trace, EvalStats, ModelEnv, Policy, PpoConfig, PpoOutcome, RealTaskEnv,
};
use crate::rng::derive_seed;
use crate::selfmodel::{self, SelfModel, SelfModelConfig, TrainHistory};
use crate::tasks::{TaskId, TaskSpec, DEFAULT_Z_TERM};

mod reduction;
mod report;

pub use reduction::{crossing_budget, data_reduction_factor, ReductionFactor};
pub use report::{curves_csv, emit_records, emit_report, emit_transfer, records_csv, summarize, BudgetSummary, ReductionEntry, Summary, RECORD_COLUMNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env_id: EnvId,
    pub task_id: TaskId,
    /// Real-transition budgets for the self-model pipeline.
    pub budgets: Vec<usize>,
    /// Real-step budgets for the model-free baseline.
    pub baseline_budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    /// PPO steps taken inside the learned model.
    pub model_ppo_steps: usize,
    pub episode_len: usize,
    /// Share of each budget held out (whole episodes) for model validation.
    pub val_fraction: f64,
    pub eval_episodes: usize,
    pub z_term: f64,
    /// Returns at which data-reduction factors are reported.
    pub target_returns: Vec<f64>,
    pub model: SelfModelConfig,
    pub ppo: PpoConfig,
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env_id: EnvId::Pendulum,
            task_id: TaskId::PendulumUpright,
            budgets: vec![5_000],
            baseline_budgets: vec![5_000, 50_000],
            seeds: vec![0, 1, 2],
            model_ppo_steps: 300_000,
            episode_len: DEFAULT_EPISODE_LEN,
            val_fraction: 0.1,
            eval_episodes: 20,
            z_term: DEFAULT_Z_TERM,
            target_returns: Vec::new(),
            model: SelfModelConfig::default(),
            ppo: PpoConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.budgets) || !sorted(&self.baseline_budgets) {
            return Err(Error::Config("budgets must be strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_episodes == 0 || self.episode_len == 0 {
            return Err(Error::Config("eval_episodes and episode_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.task()?;
        self.model.validate()?;
        self.ppo.validate()
    }

    pub fn task(&self) -> Result<TaskSpec> {
        TaskSpec::with_params(self.task_id, self.env_id, self.ppo.horizon, self.z_term)
    }

    fn task_for(&self, task_id: TaskId) -> Result<TaskSpec> {
        TaskSpec::with_params(task_id, self.env_id, self.ppo.horizon, self.z_term)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SelfmodelPpo,
    BaselinePpo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SelfmodelPpo => "selfmodel_ppo",
            Method::BaselinePpo => "baseline_ppo",
        }
    }
}

/// Outcome of one (method, budget, seed) cell. Wall-clock time is kept
/// out of the record so reports are reproducible byte for byte; see
/// [`CellTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub env_id: EnvId,
    pub task_id: TaskId,
    pub budget: usize,
    pub seed: u64,
    /// Read from the real environment's training-step counter.
    pub real_transitions_used: u64,
    /// Real steps spent on evaluation, reported separately from the budget.
    pub eval_transitions: u64,
    /// Steps taken inside the learned model (self-model pipeline only).
    pub model_env_steps: u64,
    /// `NaN` (serialized as `null`) for a failed run.
    #[serde(with = "nan_as_null")]
    pub eval_return_mean: f64,
    #[serde(with = "nan_as_null")]
    pub eval_return_std: f64,
    pub max_z_mean: Option<f64>,
    pub displacement_mean: Option<f64>,
    pub failed: bool,
    pub diagnostics: Option<String>,
}

impl MetricsRecord {
    fn failed(method: Method, cfg: &ExperimentConfig, budget: usize, seed: u64, err: &Error) -> Self {
        Self {
            method,
            env_id: cfg.env_id,
            task_id: cfg.task_id,
            budget,
            seed,
            real_transitions_used: 0,
            eval_transitions: 0,
            model_env_steps: 0,
            eval_return_mean: f64::NAN,
            eval_return_std: f64::NAN,
            max_z_mean: None,
            displacement_mean: None,
            failed: true,
            diagnostics: Some(err.to_string()),
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: Method,
    pub budget: usize,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

/// Everything the self-model pipeline produced along the way.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub dataset: Dataset,
    pub model: SelfModel,
    pub history: TrainHistory,
    pub ppo: PpoOutcome,
    pub eval: EvalStats,
}

/// Collects `budget` random transitions, trains a self-model on them and
/// returns it with the real environment (still holding its counters).
pub fn build_self_model(cfg: &ExperimentConfig, budget: usize, seed: u64) -> Result<(RealEnv, Dataset, SelfModel, TrainHistory)> {
    let mut env = RealEnv::new(cfg.env_id);
    let ds = collect_random_in(&mut env, budget, cfg.episode_len, derive_seed(seed, "collect"))?;
    let n_val = (budget as f64 * cfg.val_fraction).round() as usize;
    let (train, val) = holdout(&ds, n_val, derive_seed(seed, "split"))?;
    let (model, history) = selfmodel::train::<f64>(&train, &val, &cfg.model, derive_seed(seed, "model"))?;
    Ok((env, ds, model, history))
}

fn check_budget(env: &RealEnv, budget: usize) -> Result<()> {
    if env.training_steps() != budget as u64 {
        return Err(Error::Contract(format!(
            "real environment recorded {} training transitions for a budget of {budget}",
            env.training_steps()
        )));
    }
    Ok(())
}

fn train_in_model(cfg: &ExperimentConfig, model: &SelfModel, ds: &Dataset, task: TaskSpec, seed: u64) -> Result<PpoOutcome> {
    let mut menv = ModelEnv::new(model, task, ds.initial_states())?;
    let ppo_cfg = PpoConfig {
        total_steps: cfg.model_ppo_steps,
        ..cfg.ppo.clone()
    };
    ppo_train(&mut menv, None, &ppo_cfg, seed)
}

/// Evaluates `policy` on `env` switched to evaluation accounting.
fn eval_real(env: RealEnv, task: TaskSpec, policy: &Policy, episodes: usize, seed: u64) -> Result<(RealEnv, EvalStats)> {
    let mut env = env;
    let mode = env.accounting();
    env.set_accounting(Accounting::Evaluation);
    let mut tenv = RealTaskEnv::new(env, task)?;
    let stats = eval_policy(&mut tenv, policy, episodes, seed)?;
    let mut env = tenv.into_inner();
    env.set_accounting(mode);
    Ok((env, stats))
}

/// Random data → self-model → PPO inside the model → evaluation on the
/// real environment. The record's real usage comes from the environment's
/// counter and must equal the budget.
pub fn run_selfmodel_pipeline(cfg: &ExperimentConfig, budget: usize, seed: u64) -> Result<(MetricsRecord, PipelineArtifacts)> {
    let task = cfg.task()?;
    let (env, dataset, model, history) = build_self_model(cfg, budget, seed)?;
    let ppo = train_in_model(cfg, &model, &dataset, task.clone(), derive_seed(seed, "ppo"))?;
    let (env, eval) = eval_real(env, task, &ppo.policy, cfg.eval_episodes, derive_seed(seed, "eval"))?;
    check_budget(&env, budget)?;
    let record = MetricsRecord {
        method: Method::SelfmodelPpo,
        env_id: cfg.env_id,
        task_id: cfg.task_id,
        budget,
        seed,
        real_transitions_used: env.training_steps(),
        eval_transitions: env.eval_steps(),
        model_env_steps: ppo.env_steps as u64,
        eval_return_mean: eval.return_mean,
        eval_return_std: eval.return_std,
        max_z_mean: eval.max_z_mean,
        displacement_mean: eval.displacement_mean,
        failed: false,
        diagnostics: None,
    };
    Ok((
        record,
        PipelineArtifacts {
            dataset,
            model,
            history,
            ppo,
            eval,
        },
    ))
}

/// PPO directly on the real environment for exactly `budget` steps.
pub fn run_baseline(cfg: &ExperimentConfig, budget: usize, seed: u64) -> Result<(MetricsRecord, PpoOutcome)> {
    let task = cfg.task()?;
    let mut tenv = RealTaskEnv::new(RealEnv::new(cfg.env_id), task.clone())?;
    let ppo_cfg = PpoConfig {
        total_steps: budget,
        ..cfg.ppo.clone()
    };
    let ppo = ppo_train(&mut tenv, None, &ppo_cfg, derive_seed(seed, "baseline.ppo"))?;
    let (env, eval) = eval_real(tenv.into_inner(), task, &ppo.policy, cfg.eval_episodes, derive_seed(seed, "eval"))?;
    check_budget(&env, budget)?;
    let record = MetricsRecord {
        method: Method::BaselinePpo,
        env_id: cfg.env_id,
        task_id: cfg.task_id,
        budget,
        seed,
        real_transitions_used: env.training_steps(),
        eval_transitions: env.eval_steps(),
        model_env_steps: 0,
        eval_return_mean: eval.return_mean,
        eval_return_std: eval.return_std,
        max_z_mean: eval.max_z_mean,
        displacement_mean: eval.displacement_mean,
        failed: false,
        diagnostics: None,
    };
    Ok((record, ppo))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<CellTiming>,
    pub summary: Summary,
}

/// Every (method × budget × seed) cell, run on up to `jobs` threads.
/// Records come back in a fixed order (self-model cells first, then
/// baseline; budgets ascending; seeds in configuration order) whatever the
/// scheduling. A failing cell becomes a record flagged `failed`.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &b in &cfg.budgets {
        for &s in &cfg.seeds {
            cells.push((Method::SelfmodelPpo, b, s));
        }
    }
    for &b in &cfg.baseline_budgets {
        for &s in &cfg.seeds {
            cells.push((Method::BaselinePpo, b, s));
        }
    }
    let results: Vec<Mutex<Option<(MetricsRecord, CellTiming)>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(method, budget, seed)) = cells.get(i) else { break };
        let start = Instant::now();
        let outcome = match method {
            Method::SelfmodelPpo => run_selfmodel_pipeline(cfg, budget, seed).map(|r| r.0),
            Method::BaselinePpo => run_baseline(cfg, budget, seed).map(|r| r.0),
        };
        let record = outcome.unwrap_or_else(|e| {
            log::warn!("{} budget {budget} seed {seed} failed: {e}", method.as_str());
            MetricsRecord::failed(method, cfg, budget, seed, &e)
        });
        let timing = CellTiming {
            method,
            budget,
            seed,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} budget {budget} seed {seed}: return {:.2} ({:.1}s)",
            method.as_str(),
            record.eval_return_mean,
            timing.wall_clock_seconds
        );
        *results[i].lock().expect("result slot") = Some((record, timing));
    };
    let jobs = jobs.max(1).min(cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 1..jobs {
            scope.spawn(worker);
        }
        worker();
    });
    let (records, timings): (Vec<_>, Vec<_>) = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .unzip();
    let summary = summarize(&records, &cfg.target_returns);
    Ok(SweepOutcome {
        records,
        timings,
        summary,
    })
}

/// Height over time for one deterministic episode per policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZTraces {
    pub jump: Vec<f64>,
    pub forward: Vec<f64>,
    pub untrained: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub forward: MetricsRecord,
    pub jump: MetricsRecord,
    pub forward_eval: EvalStats,
    pub jump_eval: EvalStats,
    /// The untrained policy, evaluated on the jump task.
    pub untrained_eval: EvalStats,
    /// The untrained policy, evaluated on the forward task.
    pub untrained_forward_eval: EvalStats,
    /// Real training transitions after both tasks were learned.
    pub real_training_steps: u64,
    /// Every real evaluation step, itemized.
    pub real_eval_steps: u64,
    pub traces: ZTraces,
}

/// One dataset and one self-model, then two independent PPO runs inside
/// the model (forward and jump). Neither run touches the real environment;
/// all real steps after collection are evaluation steps.
pub fn run_transfer(cfg: &ExperimentConfig, budget: usize, seed: u64) -> Result<(TransferOutcome, SelfModel)> {
    if cfg.env_id != EnvId::PointHopper {
        return Err(Error::Config("task transfer runs on point_hopper".into()));
    }
    let (mut env, dataset, model, _history) = build_self_model(cfg, budget, seed)?;
    let eval_seed = derive_seed(seed, "eval");
    let run = |task_id: TaskId, env: RealEnv| -> Result<(RealEnv, PpoOutcome, EvalStats, MetricsRecord)> {
        let task = cfg.task_for(task_id)?;
        let ppo = train_in_model(cfg, &model, &dataset, task.clone(), derive_seed(seed, &format!("ppo.{task_id}")))?;
        check_budget(&env, budget)?;
        let before = env.eval_steps();
        let (env, eval) = eval_real(env, task, &ppo.policy, cfg.eval_episodes, eval_seed)?;
        let record = MetricsRecord {
            method: Method::SelfmodelPpo,
            env_id: cfg.env_id,
            task_id,
            budget,
            seed,
            real_transitions_used: env.training_steps(),
            eval_transitions: env.eval_steps() - before,
            model_env_steps: ppo.env_steps as u64,
            eval_return_mean: eval.return_mean,
            eval_return_std: eval.return_std,
            max_z_mean: eval.max_z_mean,
            displacement_mean: eval.displacement_mean,
            failed: false,
            diagnostics: None,
        };
        Ok((env, ppo, eval, record))
    };
    let (e, fwd_ppo, forward_eval, forward) = run(TaskId::Forward, env)?;
    let (e, jump_ppo, jump_eval, jump) = run(TaskId::Jump, e)?;
    env = e;
    let desc = env.descriptor().clone();
    let untrained = Policy::<f64>::new(desc.state_dim, desc.action_dim, &cfg.ppo.hidden_sizes, derive_seed(seed, "untrained"))?;
    let (e, untrained_eval) = eval_real(env, cfg.task_for(TaskId::Jump)?, &untrained, cfg.eval_episodes, eval_seed)?;
    let (e, untrained_forward_eval) = eval_real(e, cfg.task_for(TaskId::Forward)?, &untrained, cfg.eval_episodes, eval_seed)?;
    env = e;

    // Traces use the forward task so every policy runs the full horizon.
    let trace_task = cfg.task_for(TaskId::Forward)?;
    let trace = |policy: &Policy, env: RealEnv| -> Result<(RealEnv, Vec<f64>)> {
        let mut env = env;
        env.set_accounting(Accounting::Evaluation);
        let mut tenv = RealTaskEnv::new(env, trace_task.clone())?;
        let (states, _) = rollout_trace(&mut tenv, policy, derive_seed(seed, "trace"))?;
        Ok((tenv.into_inner(), states.iter().map(|s| s[hopper::Z]).collect()))
    };
    let (e, jump_z) = trace(&jump_ppo.policy, env)?;
    let (e, forward_z) = trace(&fwd_ppo.policy, e)?;
    let (e, untrained_z) = trace(&untrained, e)?;
    env = e;
    check_budget(&env, budget)?;
    Ok((
        TransferOutcome {
            forward,
            jump,
            forward_eval,
            jump_eval,
            untrained_eval,
            untrained_forward_eval,
            real_training_steps: env.training_steps(),
            real_eval_steps: env.eval_steps(),
            traces: ZTraces {
                jump: jump_z,
                forward: forward_z,
                untrained: untrained_z,
            },
        },
        model,
    ))
}
