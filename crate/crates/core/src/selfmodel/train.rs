//! Losses, minibatch BPTT training with early stopping, and open-loop
//! horizon evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{SelfModel, SelfModelConfig};
use crate::dataset::{compute_norm_stats, extract_sequences, Dataset, NormStats, SequenceWindow};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, NodeId, ParamStore, Tape, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Horizons reported in the per-epoch validation columns.
pub const HISTORY_HORIZONS: [usize; 3] = [1, 10, 100];

/// Windows evaluated together in the gradient-free batched rollout.
const EVAL_CHUNK: usize = 256;

/// The three loss terms (normalized-space MSE) and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_single: f64,
    pub l_seq: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(l_recon: f64, l_single: f64, l_seq: f64, cfg: &SelfModelConfig) -> Self {
        Self {
            l_recon,
            l_single,
            l_seq,
            total: cfg.w_recon * l_recon + cfg.w_single * l_single + cfg.w_seq * l_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_mse_h1: Option<f64>,
    pub val_mse_h10: Option<f64>,
    pub val_mse_h100: Option<f64>,
}

/// Everything recorded while training one model, including the window
/// stride actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub n: usize,
    pub stride: usize,
    pub val_stride: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub skipped_train_episodes: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,l_recon,l_single,l_seq,val_mse_h1,val_mse_h10,val_mse_h100")?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.train.l_recon,
                e.train.l_single,
                e.train.l_seq,
                opt(e.val_mse_h1),
                opt(e.val_mse_h10),
                opt(e.val_mse_h100)
            )?;
        }
        Ok(())
    }
}

/// Open-loop prediction error at selected horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    /// `(horizon, mean normalized-space MSE)` for every horizon with data.
    pub mse: Vec<(usize, f64)>,
    /// Requested horizons longer than every episode.
    pub skipped: Vec<usize>,
    /// Length of the windows used; every reported horizon shares them.
    pub window_len: usize,
    pub windows: usize,
}

impl HorizonReport {
    pub fn at(&self, horizon: usize) -> Option<f64> {
        self.mse.iter().find(|(h, _)| *h == horizon).map(|&(_, v)| v)
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> impl Iterator<Item = T> + '_ {
    v.iter().map(|&x| T::of(x))
}

/// Stacked, normalized inputs and targets for a batch of windows.
struct Batch<T> {
    b: usize,
    start: Tensor<T>,
    actions: Vec<Tensor<T>>,
    targets: Vec<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    fn new(norm: &NormStats, windows: &[SequenceWindow<'_>], steps: usize) -> Result<Self> {
        let b = windows.len();
        let sd = norm.state_dim();
        let ad = windows[0].action(0).len();
        let mut start = Vec::with_capacity(b * sd);
        for w in windows {
            if w.len() < steps {
                return Err(shape_err("self_model", "window shorter than the requested rollout"));
            }
            start.extend(to_t::<T>(&norm.apply(w.start_state())));
        }
        let mut actions = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        for k in 0..steps {
            let mut a = Vec::with_capacity(b * ad);
            let mut t = Vec::with_capacity(b * sd);
            for w in windows {
                a.extend(to_t::<T>(w.action(k)));
                t.extend(to_t::<T>(&norm.apply(w.target(k))));
            }
            actions.push(Tensor::matrix(b, ad, a)?);
            targets.push(Tensor::matrix(b, sd, t)?);
        }
        Ok(Self {
            b,
            start: Tensor::matrix(b, sd, start)?,
            actions,
            targets,
        })
    }
}

/// Records the three losses for one batch; returns `(recon, single, seq, total)` nodes.
fn record_losses<T: Scalar>(
    tape: &mut Tape<T>,
    model: &SelfModel<T>,
    batch: &Batch<T>,
) -> Result<[NodeId; 4]> {
    let cfg = &model.config;
    let store = &model.params;
    let n = batch.actions.len();
    let s0 = tape.constant(batch.start.clone());
    let h0 = tape.constant(Tensor::zeros(&[batch.b, model.hidden_size()]));
    let hc = tape.gru(store, &model.corrector, s0, h0)?;
    let recon = tape.mlp(store, &model.decoder, hc)?;
    let l_recon = tape.mse(recon, &batch.start)?;
    let mut h = hc;
    let mut step_losses = Vec::with_capacity(n);
    for k in 0..n {
        let a = tape.constant(batch.actions[k].clone());
        h = tape.gru(store, &model.predictor, a, h)?;
        let s_hat = tape.mlp(store, &model.decoder, h)?;
        step_losses.push(tape.mse(s_hat, &batch.targets[k])?);
    }
    // The first open-loop step is exactly the single-step prediction.
    let l_single = step_losses[0];
    let inv_n = T::of(1.0 / n as f64);
    let terms: Vec<(NodeId, T)> = step_losses.iter().map(|&id| (id, inv_n)).collect();
    let l_seq = tape.weighted_sum(&terms)?;
    let total = tape.weighted_sum(&[
        (l_recon, T::of(cfg.w_recon)),
        (l_single, T::of(cfg.w_single)),
        (l_seq, T::of(cfg.w_seq)),
    ])?;
    Ok([l_recon, l_single, l_seq, total])
}

/// Gradient-free batched rollout. Returns the reconstruction squared-error
/// sum and, for each step, the squared-error sum over the batch and state
/// dimensions.
fn rollout_sq_errors<T: Scalar>(model: &SelfModel<T>, batch: &Batch<T>) -> Result<(f64, Vec<f64>)> {
    let store = &model.params;
    let sq = |pred: &Tensor<T>, target: &Tensor<T>| -> f64 {
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum()
    };
    let h0 = Tensor::zeros(&[batch.b, model.hidden_size()]);
    let mut h = model.corrector.forward(store, &batch.start, &h0)?;
    let recon = sq(&model.decoder.forward(store, &h)?, &batch.start);
    let mut steps = Vec::with_capacity(batch.actions.len());
    for (a, target) in batch.actions.iter().zip(&batch.targets) {
        h = model.predictor.forward(store, a, &h)?;
        steps.push(sq(&model.decoder.forward(store, &h)?, target));
    }
    Ok((recon, steps))
}

/// Per-step mean squared error (normalized space) over `windows`, plus the
/// mean reconstruction error.
fn mean_step_errors<T: Scalar>(
    model: &SelfModel<T>,
    windows: &[SequenceWindow<'_>],
    steps: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut recon = 0.0;
    let mut acc = vec![0.0; steps];
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = Batch::new(&model.norm, chunk, steps)?;
        let (r, s) = rollout_sq_errors(model, &batch)?;
        recon += r;
        acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
    }
    let denom = (windows.len() * model.state_dim()) as f64;
    Ok((recon / denom, acc.into_iter().map(|v| v / denom).collect()))
}

/// Mean loss terms over `windows`, without recording gradients. All
/// windows must share one length `n`.
pub fn compute_losses<T: Scalar>(model: &SelfModel<T>, windows: &[SequenceWindow<'_>]) -> Result<LossBreakdown> {
    let Some(first) = windows.first() else {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    };
    let n = first.len();
    if n == 0 || windows.iter().any(|w| w.len() != n) {
        return Err(shape_err("compute_losses", "windows must share one non-zero length"));
    }
    let (recon, steps) = mean_step_errors(model, windows, n)?;
    let seq = steps.iter().sum::<f64>() / n as f64;
    Ok(LossBreakdown::weighted(recon, steps[0], seq, &model.config))
}

/// Records the losses over `windows` (one batch, shared length) and adds
/// d(total)/d(params) to the model's gradient buffers.
pub fn accumulate_gradients<T: Scalar>(model: &mut SelfModel<T>, windows: &[SequenceWindow<'_>]) -> Result<LossBreakdown> {
    let Some(first) = windows.first() else {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    };
    let n = first.len();
    if n == 0 || windows.iter().any(|w| w.len() != n) {
        return Err(shape_err("accumulate_gradients", "windows must share one non-zero length"));
    }
    let batch = Batch::<T>::new(&model.norm, windows, n)?;
    let mut tape = Tape::new(&model.params);
    let ids = record_losses(&mut tape, model, &batch)?;
    tape.backward(&mut model.params, ids[3])?;
    let v = |i: usize| tape.scalar(ids[i]).as_f64();
    Ok(LossBreakdown {
        l_recon: v(0),
        l_single: v(1),
        l_seq: v(2),
        total: v(3),
    })
}

/// Windows long enough for the longest feasible requested horizon.
fn horizon_windows<'a>(ds: &'a Dataset, horizons: &[usize], stride: usize) -> Result<(usize, Vec<usize>, Vec<SequenceWindow<'a>>)> {
    if horizons.iter().any(|&h| h == 0) {
        return Err(Error::Config("horizons must be at least 1".into()));
    }
    let longest = ds.episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    let skipped: Vec<usize> = horizons.iter().copied().filter(|&h| h > longest).collect();
    let len = horizons.iter().copied().filter(|&h| h <= longest).max().unwrap_or(0);
    if len == 0 {
        return Ok((0, skipped, Vec::new()));
    }
    let windows = extract_sequences(ds, len, stride)?.windows;
    Ok((len, skipped, windows))
}

/// Open-loop MSE at each horizon `k`: the model is seeded with `s_t`, fed
/// the recorded actions, and its `k`-step prediction is compared with
/// `s_{t+k}` in normalized space. Horizons longer than every episode are
/// listed in `skipped` rather than failing.
pub fn evaluate_horizons<T: Scalar>(
    model: &SelfModel<T>,
    ds: &Dataset,
    horizons: &[usize],
    stride: usize,
) -> Result<HorizonReport> {
    let (len, skipped, windows) = horizon_windows(ds, horizons, stride)?;
    if windows.is_empty() {
        return Ok(HorizonReport {
            mse: Vec::new(),
            skipped: horizons.to_vec(),
            window_len: 0,
            windows: 0,
        });
    }
    let (_, steps) = mean_step_errors(model, &windows, len)?;
    let mse = horizons
        .iter()
        .filter(|&&h| h <= len)
        .map(|&h| (h, steps[h - 1]))
        .collect();
    Ok(HorizonReport {
        mse,
        skipped,
        window_len: len,
        windows: windows.len(),
    })
}

/// The "predict no change" baseline on the same windows
/// [`evaluate_horizons`] would use: MSE between normalized `s_t` and `s_{t+k}`.
pub fn persistence_horizons(norm: &NormStats, ds: &Dataset, horizons: &[usize], stride: usize) -> Result<HorizonReport> {
    let (len, skipped, windows) = horizon_windows(ds, horizons, stride)?;
    if windows.is_empty() {
        return Ok(HorizonReport {
            mse: Vec::new(),
            skipped: horizons.to_vec(),
            window_len: 0,
            windows: 0,
        });
    }
    let denom = (windows.len() * norm.state_dim()) as f64;
    let mse = horizons
        .iter()
        .filter(|&&h| h <= len)
        .map(|&h| {
            let total: f64 = windows
                .iter()
                .map(|w| {
                    let a = norm.apply(w.start_state());
                    let b = norm.apply(w.target(h - 1));
                    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum();
            (h, total / denom)
        })
        .collect();
    Ok(HorizonReport {
        mse,
        skipped,
        window_len: len,
        windows: windows.len(),
    })
}

/// Trains a fresh self-model on `train_ds`, selecting the epoch with the
/// lowest validation single-step MSE. Normalization statistics come from
/// the training set only. Training stops after `patience` epochs without
/// improvement or after `max_epochs`.
pub fn train<T: Scalar>(
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &SelfModelConfig,
    seed: u64,
) -> Result<(SelfModel<T>, TrainHistory)> {
    config.validate()?;
    let desc = &train_ds.descriptor;
    if val_ds.descriptor.env_id != desc.env_id {
        return Err(Error::Config("training and validation data come from different environments".into()));
    }
    let norm = match &train_ds.norm {
        Some(n) => n.clone(),
        None => compute_norm_stats(train_ds)?,
    };
    let seqs = extract_sequences(train_ds, config.n, config.stride)?;
    if seqs.windows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no training episode is at least {} steps long ({} skipped)",
            config.n, seqs.skipped_episodes
        )));
    }
    let windows = seqs.windows;
    let mut model = SelfModel::<T>::new(desc.state_dim, desc.action_dim, config, norm, Some(desc.env_id), seed)?;
    let val_probe = horizon_windows(val_ds, &HISTORY_HORIZONS, config.val_stride)?;
    let val_windows = val_probe.2.len();
    drop(val_probe);

    let adam_cfg = AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut adam = AdamState::new(&model.params);
    let mut shuffle_rng = rng::stream(seed, "model.shuffle");
    let mut order: Vec<usize> = (0..windows.len()).collect();

    let mut history = TrainHistory {
        n: config.n,
        stride: config.stride,
        val_stride: config.val_stride,
        train_windows: windows.len(),
        val_windows,
        skipped_train_episodes: seqs.skipped_episodes,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let chunk: Vec<SequenceWindow<'_>> = idx.iter().map(|&i| windows[i]).collect();
            let batch = Batch::<T>::new(&model.norm, &chunk, config.n)?;
            let mut tape = Tape::new(&model.params);
            let [lr_, ls_, lq_, total] = record_losses(&mut tape, &model, &batch)?;
            let loss = tape.scalar(total).as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("self-model loss became {loss} at epoch {epoch}, batch {bi}")));
            }
            for (s, id) in sums.iter_mut().zip([lr_, ls_, lq_]) {
                *s += tape.scalar(id).as_f64() * chunk.len() as f64;
            }
            tape.backward(&mut model.params, total)?;
            model.params.clip_grad_norm(T::of(config.grad_clip));
            adam.step(&mut model.params, &adam_cfg).map_err(|e| match e {
                Error::NonFinite(m) => Error::Diverged(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
        }
        let w = windows.len() as f64;
        let train_loss = LossBreakdown::weighted(sums[0] / w, sums[1] / w, sums[2] / w, config);

        let val = evaluate_horizons(&model, val_ds, &HISTORY_HORIZONS, config.val_stride)?;
        let record = EpochRecord {
            epoch,
            train: train_loss,
            val_mse_h1: val.at(1),
            val_mse_h10: val.at(10),
            val_mse_h100: val.at(100),
        };
        // Without validation data, selection falls back to the training loss.
        let score = record.val_mse_h1.unwrap_or(train_loss.total);
        log::debug!("self-model epoch {epoch}: train {:.5} val_h1 {:?}", train_loss.total, record.val_mse_h1);
        history.epochs.push(record);
        if !score.is_finite() {
            return Err(Error::Diverged(format!("validation error became {score} at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}
