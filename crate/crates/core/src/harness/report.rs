//! Aggregation and on-disk reports. Everything except `timings.csv` is a
//! deterministic function of the configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{data_reduction_factor, ExperimentConfig, Method, MetricsRecord, ReductionFactor, SweepOutcome, TransferOutcome};
use crate::error::Result;

pub const RECORD_COLUMNS: [&str; 14] = [
    "method",
    "env_id",
    "task_id",
    "budget",
    "seed",
    "real_transitions_used",
    "eval_transitions",
    "model_env_steps",
    "eval_return_mean",
    "eval_return_std",
    "max_z_mean",
    "displacement_mean",
    "failed",
    "diagnostics",
];

/// Across-seed aggregate of one (method, budget) cell; failed runs are
/// counted but excluded from the statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub method: Method,
    pub budget: usize,
    pub runs: usize,
    pub failed: usize,
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
    pub max_z_mean: Option<f64>,
    pub displacement_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionEntry {
    pub target_return: f64,
    pub factor: Option<ReductionFactor>,
    /// Why no factor exists, when it doesn't.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub budgets: Vec<BudgetSummary>,
    pub reductions: Vec<ReductionEntry>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

pub fn summarize(records: &[MetricsRecord], targets: &[f64]) -> Summary {
    let mut cells: BTreeMap<(Method, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method, r.budget)).or_default().push(r);
    }
    let budgets: Vec<BudgetSummary> = cells
        .into_iter()
        .map(|((method, budget), rs)| {
            let ok: Vec<&MetricsRecord> = rs.iter().copied().filter(|r| !r.failed).collect();
            let returns: Vec<f64> = ok.iter().map(|r| r.eval_return_mean).collect();
            let max_z: Vec<f64> = ok.iter().filter_map(|r| r.max_z_mean).collect();
            let disp: Vec<f64> = ok.iter().filter_map(|r| r.displacement_mean).collect();
            BudgetSummary {
                method,
                budget,
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                return_mean: mean(&returns),
                return_std: std(&returns),
                max_z_mean: mean(&max_z),
                displacement_mean: mean(&disp),
            }
        })
        .collect();
    let curve = |m: Method| -> Vec<(usize, f64)> {
        budgets
            .iter()
            .filter(|b| b.method == m)
            .filter_map(|b| b.return_mean.map(|r| (b.budget, r)))
            .collect()
    };
    let (model, baseline) = (curve(Method::SelfmodelPpo), curve(Method::BaselinePpo));
    let reductions = targets
        .iter()
        .map(|&t| match data_reduction_factor(&model, &baseline, t) {
            Ok(f) => ReductionEntry {
                target_return: t,
                factor: Some(f),
                note: None,
            },
            Err(e) => ReductionEntry {
                target_return: t,
                factor: None,
                note: Some(e.to_string()),
            },
        })
        .collect();
    Summary { budgets, reductions }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut out = RECORD_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method.as_str(),
            r.env_id,
            r.task_id,
            r.budget,
            r.seed,
            r.real_transitions_used,
            r.eval_transitions,
            r.model_env_steps,
            opt(r.eval_return_mean.is_finite().then_some(r.eval_return_mean)),
            opt(r.eval_return_std.is_finite().then_some(r.eval_return_std)),
            opt(r.max_z_mean),
            opt(r.displacement_mean),
            r.failed,
            quote(r.diagnostics.as_deref().unwrap_or(""))
        );
    }
    out
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report values serialize");
    s.push('\n');
    s
}

/// Budget-versus-return table, one row per (method, budget).
pub fn curves_csv(summary: &Summary) -> String {
    let mut out = String::from("method,budget,runs,failed,return_mean,return_std,max_z_mean,displacement_mean\n");
    for b in &summary.budgets {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            b.method.as_str(),
            b.budget,
            b.runs,
            b.failed,
            opt(b.return_mean),
            opt(b.return_std),
            opt(b.max_z_mean),
            opt(b.displacement_mean)
        );
    }
    out
}

/// Writes the deterministic part of a report: `config.json`,
/// `records.csv`, `records.json`, `summary.json` and `curves.csv`.
pub fn emit_records(dir: &Path, cfg: &ExperimentConfig, records: &[MetricsRecord], summary: &Summary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), json(cfg))?;
    fs::write(dir.join("records.csv"), records_csv(records))?;
    fs::write(dir.join("records.json"), json(&records))?;
    fs::write(dir.join("summary.json"), json(summary))?;
    fs::write(dir.join("curves.csv"), curves_csv(summary))?;
    Ok(())
}

/// [`emit_records`] plus `timings.csv` with per-cell wall-clock seconds.
pub fn emit_report(dir: &Path, cfg: &ExperimentConfig, outcome: &SweepOutcome) -> Result<()> {
    emit_records(dir, cfg, &outcome.records, &outcome.summary)?;
    let mut timings = String::from("method,budget,seed,wall_clock_seconds\n");
    for t in &outcome.timings {
        let _ = writeln!(timings, "{},{},{},{:.3}", t.method.as_str(), t.budget, t.seed, t.wall_clock_seconds);
    }
    fs::write(dir.join("timings.csv"), timings)?;
    Ok(())
}

/// Writes `transfer.json` and `z_traces.csv` (one row per step; a blank
/// cell once a trace has ended).
pub fn emit_transfer(dir: &Path, outcome: &TransferOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("transfer.json"), json(outcome))?;
    let tr = &outcome.traces;
    let len = tr.jump.len().max(tr.forward.len()).max(tr.untrained.len());
    let cell = |v: &[f64], t: usize| v.get(t).map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("t,z_jump,z_forward,z_untrained\n");
    for t in 0..len {
        let _ = writeln!(csv, "{t},{},{},{}", cell(&tr.jump, t), cell(&tr.forward, t), cell(&tr.untrained, t));
    }
    fs::write(dir.join("z_traces.csv"), csv)?;
    Ok(())
}
