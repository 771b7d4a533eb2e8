use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use smlab::dataset::{collect_random, holdout, Dataset};
use smlab::envs::{env_reset, EnvId};
use smlab::harness::{self, ExperimentConfig, MetricsRecord};
use smlab::policy::{
    eval_policy, ppo_train, CurveEval, ModelEnv, PolicyCheckpoint, PpoConfig, RealTaskEnv,
};
use smlab::rng::derive_seed;
use smlab::selfmodel::{self, evaluate_horizons, persistence_horizons, SelfModel};
use smlab::tasks::{TaskId, TaskSpec};
use smlab::Error;

/// Number of reset states drawn when a model-trained policy has no dataset
/// to take episode-initial states from.
const RESET_POOL: usize = 256;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            e => CliError::Runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "smlab", version, about = "Learned self-models and model-based policy training")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug); RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &str {
        &self.log
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record uniformly random transitions into an SMD1 dataset.
    Collect(CollectArgs),
    /// Train a self-model on an SMD1 dataset and write an SMM1 file.
    TrainModel(TrainModelArgs),
    /// Open-loop prediction error of a model against the persistence baseline.
    EvalModel(EvalModelArgs),
    /// Train a policy with PPO inside a self-model or on the real environment.
    TrainPolicy(TrainPolicyArgs),
    /// Evaluate an SMP1 policy on the real environment.
    EvalPolicy(EvalPolicyArgs),
    /// Sweep the self-model pipeline and the baseline over budgets and seeds.
    Benchmark(BenchmarkArgs),
    /// One dataset and one model, then forward and jump policies on point_hopper.
    Transfer(TransferArgs),
    /// Rebuild summary tables from an existing benchmark directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct CollectArgs {
    #[arg(long)]
    env: EnvId,
    /// Number of transitions to record.
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 200)]
    episode_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the transitions as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainModelArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides model.max_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides model.stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Overrides model.hidden_size.
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Overrides model.n (open-loop training horizon).
    #[arg(long)]
    n: Option<usize>,
    /// Overrides val_fraction.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Output model; training history goes to <out>.history.{csv,json}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated open-loop horizons.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    horizons: Vec<usize>,
    /// Spacing between evaluation windows.
    #[arg(long, default_value_t = 10)]
    stride: usize,
}

#[derive(Debug, Args)]
struct TrainPolicyArgs {
    /// Train inside this self-model (no real transitions).
    #[arg(long, conflicts_with = "env", required_unless_present = "env")]
    model: Option<PathBuf>,
    /// Train on the real environment instead.
    #[arg(long)]
    env: Option<EnvId>,
    #[arg(long)]
    task: TaskId,
    /// Dataset whose episode-initial states seed model episodes; without
    /// it, seeds are drawn from the environment's reset distribution.
    #[arg(long, requires = "model")]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides ppo.total_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output policy; the learning curve goes to <out>.curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalPolicyArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Defaults to the environment the policy was trained for.
    #[arg(long)]
    env: Option<EnvId>,
    /// Defaults to the task the policy was trained for.
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated seeds; overrides seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Real transitions collected once and shared by both tasks.
    #[arg(long, default_value_t = 20_000)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Benchmark output directory (records.json, config.json).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated target returns; overrides the recorded configuration.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    targets: Option<Vec<f64>>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Collect(a) => collect(a),
        Command::TrainModel(a) => train_model(a),
        Command::EvalModel(a) => eval_model(a),
        Command::TrainPolicy(a) => train_policy(a),
        Command::EvalPolicy(a) => eval_policy_cmd(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Transfer(a) => transfer(a),
        Command::Report(a) => report(a),
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<ExperimentConfig> {
    let Some(path) = &arg.config else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Logs the fully resolved configuration before a run.
fn echo(what: &str, value: &impl Serialize) {
    log::info!("resolved {what}: {}", serde_json::to_string(value).expect("config serializes"));
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("result serializes"));
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn collect(a: CollectArgs) -> CliResult {
    let ds = collect_random(&a.env.descriptor(), a.steps, a.episode_len, a.seed)?;
    create_parent(&a.out)?;
    ds.save(&a.out)?;
    if let Some(csv) = &a.csv {
        create_parent(csv)?;
        ds.write_csv(std::io::BufWriter::new(fs::File::create(csv)?))?;
    }
    log::info!(
        "wrote {} transitions in {} episodes to {}",
        ds.num_transitions(),
        ds.episodes.len(),
        a.out.display()
    );
    Ok(())
}

fn train_model(a: TrainModelArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    let m = &mut cfg.model;
    if let Some(v) = a.epochs {
        m.max_epochs = v;
    }
    if let Some(v) = a.stride {
        m.stride = v;
    }
    if let Some(v) = a.hidden_size {
        m.hidden_size = v;
    }
    if let Some(v) = a.n {
        m.n = v;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    cfg.model.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(CliError::Usage("val_fraction must lie in [0, 1)".into()));
    }
    echo("model config", &cfg.model);
    let ds = Dataset::load(&a.dataset)?;
    let n_val = (ds.num_transitions() as f64 * cfg.val_fraction).round() as usize;
    let (train, val) = holdout(&ds, n_val, derive_seed(a.seed, "split"))?;
    let (model, history) = selfmodel::train::<f64>(&train, &val, &cfg.model, derive_seed(a.seed, "model"))?;
    create_parent(&a.out)?;
    model.save(&a.out)?;
    history.write_csv(std::io::BufWriter::new(fs::File::create(with_suffix(&a.out, ".history.csv"))?))?;
    fs::write(
        with_suffix(&a.out, ".history.json"),
        serde_json::to_string_pretty(&history).map_err(Error::from)? + "\n",
    )?;
    if let Some(best) = history.epochs.iter().find(|r| r.epoch == history.best_epoch) {
        log::info!(
            "best epoch {}: train total {:.6}, validation h1 {:?}",
            best.epoch,
            best.train.total,
            best.val_mse_h1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ModelEvaluation {
    model: selfmodel::HorizonReport,
    persistence: selfmodel::HorizonReport,
}

fn eval_model(a: EvalModelArgs) -> CliResult {
    let model = SelfModel::<f64>::load(&a.model)?;
    let ds = Dataset::load(&a.dataset)?;
    let report = ModelEvaluation {
        model: evaluate_horizons(&model, &ds, &a.horizons, a.stride)?,
        persistence: persistence_horizons(&model.norm, &ds, &a.horizons, a.stride)?,
    };
    print_json(&report);
    Ok(())
}

fn train_policy(a: TrainPolicyArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let ppo_cfg = PpoConfig {
        total_steps: a.steps.unwrap_or(cfg.ppo.total_steps),
        ..cfg.ppo.clone()
    };
    ppo_cfg.validate()?;
    echo("ppo config", &ppo_cfg);
    let seed = derive_seed(a.seed, "ppo");
    let (env_id, outcome, trained_in_model) = match &a.model {
        Some(path) => {
            let model = SelfModel::<f64>::load(path)?;
            let env_id = model
                .env_id
                .ok_or_else(|| CliError::Usage("the model does not record its environment".into()))?;
            let task = TaskSpec::with_params(a.task, env_id, ppo_cfg.horizon, cfg.z_term)?;
            let seeds = match &a.dataset {
                Some(p) => Dataset::load(p)?.initial_states(),
                None => (0..RESET_POOL)
                    .map(|i| env_reset(&task.descriptor, derive_seed(a.seed, &format!("model_env.seed.{i}"))))
                    .collect(),
            };
            let mut menv = ModelEnv::new(&model, task.clone(), seeds)?;
            let mut eval_env = RealTaskEnv::for_eval(task);
            let curve = CurveEval {
                env: &mut eval_env,
                task: a.task,
            };
            (env_id, ppo_train::<f64>(&mut menv, Some(curve), &ppo_cfg, seed)?, true)
        }
        None => {
            let env_id = a.env.expect("clap requires --env without --model");
            let task = TaskSpec::with_params(a.task, env_id, ppo_cfg.horizon, cfg.z_term)?;
            let mut env = RealTaskEnv::for_task(task.clone());
            let mut eval_env = RealTaskEnv::for_eval(task);
            let curve = CurveEval {
                env: &mut eval_env,
                task: a.task,
            };
            (env_id, ppo_train::<f64>(&mut env, Some(curve), &ppo_cfg, seed)?, false)
        }
    };
    let checkpoint = PolicyCheckpoint {
        env_id,
        task_id: a.task,
        env_steps: outcome.env_steps,
        trained_in_model,
        config: ppo_cfg,
        policy: outcome.policy,
        value: outcome.value,
    };
    create_parent(&a.out)?;
    checkpoint.save(&a.out)?;
    outcome
        .curve
        .write_csv(std::io::BufWriter::new(fs::File::create(with_suffix(&a.out, ".curve.csv"))?))?;
    if let Some(last) = outcome.curve.points.last() {
        log::info!(
            "{} steps: eval return {:.2} ± {:.2}",
            last.cumulative_env_steps,
            last.eval_return_mean,
            last.eval_return_std
        );
    }
    Ok(())
}

fn eval_policy_cmd(a: EvalPolicyArgs) -> CliResult {
    let ckpt = PolicyCheckpoint::<f64>::load(&a.policy)?;
    let env_id = a.env.unwrap_or(ckpt.env_id);
    let task = TaskSpec::with_params(a.task.unwrap_or(ckpt.task_id), env_id, ckpt.config.horizon, smlab::tasks::DEFAULT_Z_TERM)?;
    let mut env = RealTaskEnv::for_eval(task);
    let stats = eval_policy(&mut env, &ckpt.policy, a.episodes, derive_seed(a.seed, "eval"))?;
    print_json(&stats);
    Ok(())
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("an output directory is required (--out or out_dir)".into()))
}

fn benchmark(a: BenchmarkArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    let dir = out_dir(a.out, &cfg)?;
    cfg.out_dir = Some(dir.display().to_string());
    cfg.validate()?;
    echo("experiment config", &cfg);
    let outcome = harness::run_sweep(&cfg, a.jobs)?;
    harness::emit_report(&dir, &cfg, &outcome)?;
    print_json(&outcome.summary);
    let failed = outcome.records.iter().filter(|r| r.failed).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see records.csv", outcome.records.len());
    }
    Ok(())
}

fn transfer(a: TransferArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    cfg.env_id = EnvId::PointHopper;
    if cfg.task_id.env() != EnvId::PointHopper {
        cfg.task_id = TaskId::Forward;
    }
    let dir = out_dir(a.out, &cfg)?;
    cfg.out_dir = Some(dir.display().to_string());
    cfg.validate()?;
    echo("experiment config", &cfg);
    let (outcome, model) = harness::run_transfer(&cfg, a.budget, a.seed)?;
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(Error::from)? + "\n",
    )?;
    harness::emit_transfer(&dir, &outcome)?;
    model.save(dir.join("model.smm"))?;
    let row = |r: &MetricsRecord| {
        format!(
            "{}: return {:.2}, max z {:.3}, displacement {:.2}",
            r.task_id,
            r.eval_return_mean,
            r.max_z_mean.unwrap_or(f64::NAN),
            r.displacement_mean.unwrap_or(f64::NAN)
        )
    };
    log::info!("{}", row(&outcome.forward));
    log::info!("{}", row(&outcome.jump));
    log::info!(
        "real transitions: {} training, {} evaluation",
        outcome.real_training_steps,
        outcome.real_eval_steps
    );
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let read = |name: &str| -> CliResult<String> {
        let p = a.input.join(name);
        fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
    };
    let mut cfg: ExperimentConfig = serde_json::from_str(&read("config.json")?).map_err(Error::from)?;
    let records: Vec<MetricsRecord> = serde_json::from_str(&read("records.json")?).map_err(Error::from)?;
    if let Some(t) = a.targets {
        cfg.target_returns = t;
    }
    let summary = harness::summarize(&records, &cfg.target_returns);
    harness::emit_records(&a.out, &cfg, &records, &summary)?;
    print_json(&summary);
    Ok(())
}
