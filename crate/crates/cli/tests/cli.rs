use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smlab::dataset::Dataset;
use smlab::policy::PolicyCheckpoint;
use smlab::selfmodel::SelfModel;

fn smlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = smlab(args);
    assert!(
        out.status.success(),
        "smlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

const TINY_CONFIG: &str = r#"{
    "budgets": [300],
    "baseline_budgets": [256],
    "seeds": [1],
    "model_ppo_steps": 256,
    "episode_len": 50,
    "val_fraction": 0.2,
    "eval_episodes": 2,
    "target_returns": [-100000.0],
    "model": {"hidden_size": 8, "decoder_hidden": 8, "n": 5, "max_epochs": 2},
    "ppo": {"steps_per_batch": 128, "minibatch_size": 32, "epochs": 2, "hidden_sizes": [8], "horizon": 50, "total_steps": 384}
}"#;

#[test]
fn no_arguments_is_a_usage_error() {
    let out = smlab(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(smlab(&["fly"]).status.code(), Some(1));
    let out = smlab(&["collect", "--env", "pendulum", "--steps", "5", "--out", "x.smd", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--bogus"));
    assert_eq!(smlab(&["collect", "--env", "moon", "--steps", "5", "--out", "x.smd"]).status.code(), Some(1));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 8] = [
        ("collect", &["--env", "--steps", "--episode-len", "--seed", "--out", "[default: 200]"]),
        ("train-model", &["--dataset", "--config", "--out", "--seed"]),
        ("eval-model", &["--model", "--dataset", "--horizons", "[default: 1,10,100]"]),
        ("train-policy", &["--model", "--env", "--task", "--config", "--seed", "--out"]),
        ("eval-policy", &["--policy", "--env", "--task", "--episodes", "--seed", "[default: 20]"]),
        ("benchmark", &["--config", "--out", "--jobs", "[default: 1]"]),
        ("transfer", &["--config", "--out", "--budget"]),
        ("report", &["--in", "--out"]),
    ];
    for (cmd, flags) in cases {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = smlab(&["train-model", "--dataset", &path(dir.path(), "none.smd"), "--out", &path(dir.path(), "m.smm")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    fs::write(&cfg, r#"{"model": {"hidden": 8}}"#).unwrap();
    ok(&["collect", "--env", "pendulum", "--steps", "50", "--out", &path(dir.path(), "d.smd")]);
    let out = smlab(&["train-model", "--dataset", &path(dir.path(), "d.smd"), "--config", &cfg, "--out", &path(dir.path(), "m.smm")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("hidden"), "{}", stderr(&out));
}

#[test]
fn collect_writes_the_requested_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.smd"), path(dir.path(), "b.smd"));
    let csv = path(dir.path(), "a.csv");
    ok(&["collect", "--env", "cartpole", "--steps", "450", "--episode-len", "100", "--seed", "7", "--out", &a, "--csv", &csv]);
    ok(&["collect", "--env", "cartpole", "--steps", "450", "--episode-len", "100", "--seed", "7", "--out", &b]);
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.num_transitions(), 450);
    assert_eq!(ds.episodes.len(), 5);
    assert_eq!(&fs::read(&a).unwrap()[..4], b"SMD1");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 451);
}

/// collect → train-model → eval-model → train-policy (model and real) →
/// eval-policy, each artifact rebuilt twice and compared byte for byte.
#[test]
fn model_and_policy_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let data = path(dir.path(), "d.smd");
    ok(&["collect", "--env", "pendulum", "--steps", "400", "--episode-len", "50", "--seed", "3", "--out", &data]);

    for run in ["m1.smm", "m2.smm"] {
        ok(&["train-model", "--dataset", &data, "--config", &cfg, "--seed", "4", "--out", &path(dir.path(), run)]);
    }
    let m1 = fs::read(path(dir.path(), "m1.smm")).unwrap();
    assert_eq!(&m1[..4], b"SMM1");
    assert_eq!(m1, fs::read(path(dir.path(), "m2.smm")).unwrap());
    let history = fs::read_to_string(path(dir.path(), "m1.smm.history.csv")).unwrap();
    assert!(history.starts_with("epoch,l_recon,l_single,l_seq,val_mse_h1,val_mse_h10,val_mse_h100"));
    let hjson: serde_json::Value = serde_json::from_str(&fs::read_to_string(path(dir.path(), "m1.smm.history.json")).unwrap()).unwrap();
    assert_eq!(hjson["stride"], 10);
    let model = SelfModel::<f64>::load(path(dir.path(), "m1.smm")).unwrap();
    assert_eq!(model.hidden_size(), 8);

    // Flags win over the configuration file.
    ok(&["train-model", "--dataset", &data, "--config", &cfg, "--hidden-size", "5", "--out", &path(dir.path(), "m3.smm")]);
    assert_eq!(SelfModel::<f64>::load(path(dir.path(), "m3.smm")).unwrap().hidden_size(), 5);

    let out = ok(&["eval-model", "--model", &path(dir.path(), "m1.smm"), "--dataset", &data, "--horizons", "1,10"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["model"]["mse"][0][0], 1);
    assert_eq!(report["persistence"]["mse"][1][0], 10);

    for run in ["p1.smp", "p2.smp"] {
        ok(&[
            "train-policy", "--model", &path(dir.path(), "m1.smm"), "--dataset", &data, "--task", "pendulum",
            "--config", &cfg, "--seed", "5", "--out", &path(dir.path(), run),
        ]);
    }
    let p1 = fs::read(path(dir.path(), "p1.smp")).unwrap();
    assert_eq!(&p1[..4], b"SMP1");
    assert_eq!(p1, fs::read(path(dir.path(), "p2.smp")).unwrap());
    let ckpt = PolicyCheckpoint::<f64>::load(path(dir.path(), "p1.smp")).unwrap();
    assert!(ckpt.trained_in_model);
    assert_eq!(ckpt.env_steps, 384);
    assert!(fs::read_to_string(path(dir.path(), "p1.smp.curve.csv")).unwrap().starts_with("cumulative_env_steps,"));

    ok(&["train-policy", "--env", "pendulum", "--task", "pendulum", "--config", &cfg, "--steps", "300", "--out", &path(dir.path(), "r.smp")]);
    let real = PolicyCheckpoint::<f64>::load(path(dir.path(), "r.smp")).unwrap();
    assert!(!real.trained_in_model);
    assert_eq!(real.env_steps, 300);

    let out = ok(&["eval-policy", "--policy", &path(dir.path(), "p1.smp"), "--episodes", "3", "--seed", "2"]);
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["episodes"], 3);
    assert_eq!(stats["returns"].as_array().unwrap().len(), 3);
    let again = ok(&["eval-policy", "--policy", &path(dir.path(), "p1.smp"), "--episodes", "3", "--seed", "2"]);
    assert_eq!(out.stdout, again.stdout);

    // A pendulum policy cannot be evaluated on a hopper task.
    let out = smlab(&["eval-policy", "--policy", &path(dir.path(), "p1.smp"), "--task", "jump"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn one_hopper_model_serves_two_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let data = path(dir.path(), "h.smd");
    ok(&["collect", "--env", "point_hopper", "--steps", "300", "--episode-len", "50", "--out", &data]);
    let before = fs::read(&data).unwrap();
    ok(&["train-model", "--dataset", &data, "--config", &cfg, "--out", &path(dir.path(), "h.smm")]);
    for task in ["jump", "forward"] {
        ok(&[
            "train-policy", "--model", &path(dir.path(), "h.smm"), "--task", task, "--config", &cfg,
            "--out", &path(dir.path(), &format!("{task}.smp")),
        ]);
        let ck = PolicyCheckpoint::<f64>::load(path(dir.path(), &format!("{task}.smp"))).unwrap();
        assert_eq!(ck.task_id.as_str(), task);
        assert!(ck.trained_in_model);
    }
    assert_eq!(fs::read(&data).unwrap(), before);
}

#[test]
fn benchmark_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    ok(&["benchmark", "--config", &cfg, "--out", &a]);
    ok(&["benchmark", "--config", &cfg, "--out", &b, "--jobs", "2"]);
    for f in ["records.csv", "records.json", "summary.json", "curves.csv"] {
        assert_eq!(
            fs::read(Path::new(&a).join(f)).unwrap(),
            fs::read(Path::new(&b).join(f)).unwrap(),
            "{f} differs"
        );
    }
    let records = fs::read_to_string(Path::new(&a).join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&a).join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["patience"], 10);
    assert_eq!(echoed["budgets"][0], 300);

    let c = path(dir.path(), "c");
    let out = ok(&["report", "--in", &a, "--out", &c, "--targets", "-1e9,1e9"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["reductions"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read(Path::new(&a).join("records.csv")).unwrap(),
        fs::read(Path::new(&c).join("records.csv")).unwrap()
    );
}

#[test]
fn transfer_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = path(dir.path(), "t");
    ok(&["transfer", "--config", &cfg, "--budget", "300", "--out", &out]);
    let traces = fs::read_to_string(Path::new(&out).join("z_traces.csv")).unwrap();
    assert!(traces.starts_with("t,z_jump,z_forward,z_untrained"));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("transfer.json")).unwrap()).unwrap();
    assert_eq!(t["real_training_steps"], 300);
    assert!(Path::new(&out).join("model.smm").exists());
}
