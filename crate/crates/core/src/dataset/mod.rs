//! Random-action transition corpora: collection, windowing, splitting,
//! normalization statistics and the `SMD1` file format.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, EnvDescriptor, EnvId, EnvState, RealEnv};
use crate::error::{Error, FormatError, Result};
use crate::formats;
use crate::rng;

mod norm;
pub use norm::NormStats;

pub const SMD_MAGIC: &[u8; 4] = b"SMD1";

/// Default episode length used while collecting random data.
pub const DEFAULT_EPISODE_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: EnvState,
    pub a: Action,
    pub s_next: EnvState,
}

/// Transitions of one uninterrupted run: `s_next` of step `i` is bit-equal
/// to `s` of step `i + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    transitions: Vec<Transition>,
}

impl Episode {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transitions(transitions: Vec<Transition>) -> Result<Self> {
        let mut ep = Self::new();
        for t in transitions {
            ep.push(t)?;
        }
        Ok(ep)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if let Some(last) = self.transitions.last() {
            let contiguous = last.s_next.len() == t.s.len()
                && last.s_next.iter().zip(t.s.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !contiguous {
                return Err(Error::Contract(format!(
                    "transition {} does not start where the previous one ended",
                    self.transitions.len()
                )));
            }
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn initial_state(&self) -> Option<&EnvState> {
        self.transitions.first().map(|t| &t.s)
    }

    /// State `i` of the trajectory, `0..=len`.
    pub fn state(&self, i: usize) -> &EnvState {
        if i == self.transitions.len() {
            &self.transitions[i - 1].s_next
        } else {
            &self.transitions[i].s
        }
    }

    pub fn is_contiguous(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].s_next.iter().zip(w[1].s.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub descriptor: EnvDescriptor,
    pub episodes: Vec<Episode>,
    pub norm: Option<NormStats>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SmdHeader {
    env_id: EnvId,
    state_dim: usize,
    action_dim: usize,
    dt: f64,
    seed: u64,
    episode_lengths: Vec<usize>,
}

/// A length-`n` training window: the start state `s_t`, the actions taken
/// from it, and the `n` states that followed.
#[derive(Debug, Clone, Copy)]
pub struct SequenceWindow<'a> {
    episode: &'a Episode,
    start: usize,
    n: usize,
}

impl<'a> SequenceWindow<'a> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn start_index(&self) -> usize {
        self.start
    }

    pub fn start_state(&self) -> &'a EnvState {
        &self.episode.transitions[self.start].s
    }

    /// Action `i` (0-based), applied to reach [`target`](Self::target)`(i)`.
    pub fn action(&self, i: usize) -> &'a Action {
        &self.episode.transitions[self.start + i].a
    }

    /// State after `i + 1` steps.
    pub fn target(&self, i: usize) -> &'a EnvState {
        &self.episode.transitions[self.start + i].s_next
    }

    pub fn actions(&self) -> impl Iterator<Item = &'a Action> + 'a {
        let (ep, start, n) = (self.episode, self.start, self.n);
        ep.transitions[start..start + n].iter().map(|t| &t.a)
    }

    pub fn targets(&self) -> impl Iterator<Item = &'a EnvState> + 'a {
        let (ep, start, n) = (self.episode, self.start, self.n);
        ep.transitions[start..start + n].iter().map(|t| &t.s_next)
    }
}

/// Windows extracted from a dataset, plus how many episodes were too short.
#[derive(Debug, Clone)]
pub struct Sequences<'a> {
    pub windows: Vec<SequenceWindow<'a>>,
    pub skipped_episodes: usize,
}

impl Dataset {
    pub fn new(descriptor: EnvDescriptor, seed: u64) -> Self {
        Self {
            descriptor,
            episodes: Vec::new(),
            norm: None,
            seed,
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Every distinct state: each transition's `s` plus each episode's final `s_next`.
    pub fn states(&self) -> impl Iterator<Item = &EnvState> {
        self.episodes
            .iter()
            .flat_map(|e| (0..e.len() + usize::from(!e.is_empty())).map(move |i| e.state(i)))
    }

    pub fn initial_states(&self) -> Vec<EnvState> {
        self.episodes.iter().filter_map(|e| e.initial_state().cloned()).collect()
    }

    /// Computes and stores [`NormStats`] for this dataset.
    pub fn with_norm(mut self) -> Result<Self> {
        self.norm = Some(compute_norm_stats(&self)?);
        Ok(self)
    }

    fn check_transition(&self, t: &Transition) -> Result<()> {
        let d = &self.descriptor;
        if t.s.len() != d.state_dim || t.s_next.len() != d.state_dim || t.a.len() != d.action_dim {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!(
                    "transition dims ({}, {}, {}) do not match {} ({}, {})",
                    t.s.len(),
                    t.a.len(),
                    t.s_next.len(),
                    d.env_id,
                    d.state_dim,
                    d.action_dim
                ),
            });
        }
        Ok(())
    }

    pub fn push_episode(&mut self, ep: Episode) -> Result<()> {
        for t in ep.transitions() {
            self.check_transition(t)?;
        }
        self.episodes.push(ep);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        formats::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SmdHeader {
            env_id: self.descriptor.env_id,
            state_dim: self.descriptor.state_dim,
            action_dim: self.descriptor.action_dim,
            dt: self.descriptor.dt,
            seed: self.seed,
            episode_lengths: self.episodes.iter().map(Episode::len).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload = self
            .transitions()
            .flat_map(|t| t.s.iter().chain(t.a.iter()).chain(t.s_next.iter()).copied());
        formats::encode(SMD_MAGIC, &header, payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = formats::decode(bytes, SMD_MAGIC, "SMD")?;
        let h: SmdHeader = formats::parse_header(header)?;
        let desc = h.env_id.descriptor();
        if h.state_dim != desc.state_dim {
            return Err(FormatError::DimMismatch {
                what: format!("{} state_dim", h.env_id),
                expected: desc.state_dim,
                found: h.state_dim,
            }
            .into());
        }
        if h.action_dim != desc.action_dim {
            return Err(FormatError::DimMismatch {
                what: format!("{} action_dim", h.env_id),
                expected: desc.action_dim,
                found: h.action_dim,
            }
            .into());
        }
        let (sd, ad) = (h.state_dim, h.action_dim);
        let row = 2 * sd + ad;
        let total: usize = h.episode_lengths.iter().sum();
        let values = formats::read_f64s(payload, total * row, "SMD payload")?;
        let mut ds = Dataset::new(EnvDescriptor { dt: h.dt, ..desc }, h.seed);
        let mut rows = values.chunks_exact(row);
        for (k, &len) in h.episode_lengths.iter().enumerate() {
            let mut ep = Episode::new();
            for _ in 0..len {
                let r = rows.next().expect("length checked");
                ep.push(Transition {
                    s: EnvState(r[..sd].to_vec()),
                    a: Action(r[sd..sd + ad].to_vec()),
                    s_next: EnvState(r[sd + ad..].to_vec()),
                })
                .map_err(|_| FormatError::Header(format!("episode {k} is not contiguous")))?;
            }
            ds.episodes.push(ep);
        }
        Ok(ds)
    }

    /// One CSV row per transition, with a header naming every column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let id = self.descriptor.env_id;
        let mut cols = vec!["episode".to_string(), "step".to_string()];
        cols.extend(id.state_names().iter().map(|n| format!("s_{n}")));
        cols.extend(id.action_names().iter().map(|n| format!("a_{n}")));
        cols.extend(id.state_names().iter().map(|n| format!("next_{n}")));
        writeln!(w, "{}", cols.join(","))?;
        for (e, ep) in self.episodes.iter().enumerate() {
            for (i, t) in ep.transitions().iter().enumerate() {
                let mut fields = vec![e.to_string(), i.to_string()];
                fields.extend(t.s.iter().chain(t.a.iter()).chain(t.s_next.iter()).map(|v| v.to_string()));
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }
}

/// Collects `num_transitions` transitions with i.i.d. uniform actions over
/// `[-1, 1]^action_dim`, resetting every `episode_len` steps.
pub fn collect_random(desc: &EnvDescriptor, num_transitions: usize, episode_len: usize, seed: u64) -> Result<Dataset> {
    let mut env = RealEnv::new(desc.env_id);
    collect_random_in(&mut env, num_transitions, episode_len, seed)
}

/// As [`collect_random`], stepping a caller-owned (and counted) environment.
pub fn collect_random_in(env: &mut RealEnv, num_transitions: usize, episode_len: usize, seed: u64) -> Result<Dataset> {
    if num_transitions == 0 {
        return Err(Error::Config("num_transitions must be at least 1".into()));
    }
    if episode_len == 0 {
        return Err(Error::Config("episode_len must be at least 1".into()));
    }
    let desc = env.descriptor().clone();
    let mut r = rng::stream(seed, "collect");
    let mut ds = Dataset::new(desc.clone(), seed);
    let mut remaining = num_transitions;
    while remaining > 0 {
        let len = remaining.min(episode_len);
        let mut s = env.reset(r.random());
        let mut ep = Episode::new();
        for _ in 0..len {
            let a = Action((0..desc.action_dim).map(|_| r.random_range(-1.0..=1.0)).collect());
            let next = env.step(&a)?;
            ep.push(Transition {
                s,
                a,
                s_next: next.clone(),
            })?;
            s = next;
        }
        ds.episodes.push(ep);
        remaining -= len;
    }
    Ok(ds)
}

/// All length-`n` windows starting every `stride` steps inside each
/// episode. Windows never cross an episode boundary; episodes shorter than
/// `n` are skipped and counted.
pub fn extract_sequences(ds: &Dataset, n: usize, stride: usize) -> Result<Sequences<'_>> {
    if n == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be at least 1".into()));
    }
    let mut windows = Vec::new();
    let mut skipped = 0;
    for ep in &ds.episodes {
        if ep.len() < n {
            skipped += 1;
            continue;
        }
        windows.extend((0..=ep.len() - n).step_by(stride).map(|start| SequenceWindow {
            episode: ep,
            start,
            n,
        }));
    }
    Ok(Sequences {
        windows,
        skipped_episodes: skipped,
    })
}

/// Episode-granularity split. Validation episodes are drawn in a seeded
/// random order until they hold at least `n_val` transitions; the remaining
/// episodes, in their original order, form the training set (truncated to
/// the first episodes covering `n_train`).
pub fn split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let total = ds.num_transitions();
    if n_train + n_val > total {
        return Err(Error::InsufficientData(format!(
            "requested {n_train} train + {n_val} validation transitions but the dataset holds {total} (short by {})",
            n_train + n_val - total
        )));
    }
    let is_val = choose_validation(ds, n_val, seed);
    let mut train = Dataset::new(ds.descriptor.clone(), ds.seed);
    let mut val = Dataset::new(ds.descriptor.clone(), ds.seed);
    let mut train_count = 0;
    for (i, ep) in ds.episodes.iter().enumerate() {
        if is_val[i] {
            val.episodes.push(ep.clone());
        } else if train_count < n_train || n_val == 0 {
            train_count += ep.len();
            train.episodes.push(ep.clone());
        }
    }
    if train_count < n_train {
        return Err(Error::InsufficientData(format!(
            "episode-granular split left {train_count} training transitions, {} short of {n_train}",
            n_train - train_count
        )));
    }
    Ok((train, val))
}

fn choose_validation(ds: &Dataset, n_val: usize, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..ds.episodes.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut is_val = vec![false; ds.episodes.len()];
    let mut val_count = 0;
    for &i in &order {
        if val_count >= n_val {
            break;
        }
        is_val[i] = true;
        val_count += ds.episodes[i].len();
    }
    is_val
}

/// Holds out whole episodes covering at least `n_val` transitions (chosen
/// exactly as [`split`] chooses them) and keeps every other episode for
/// training. At least one episode always stays in the training set.
pub fn holdout(ds: &Dataset, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.episodes.is_empty() {
        return Err(Error::InsufficientData("cannot split an empty dataset".into()));
    }
    let mut is_val = choose_validation(ds, n_val, seed);
    if is_val.iter().all(|&v| v) {
        // Keep the largest episode for training.
        let keep = (0..ds.episodes.len()).max_by_key(|&i| (ds.episodes[i].len(), usize::MAX - i)).unwrap();
        is_val[keep] = false;
    }
    let mut train = Dataset::new(ds.descriptor.clone(), ds.seed);
    let mut val = Dataset::new(ds.descriptor.clone(), ds.seed);
    for (ep, v) in ds.episodes.iter().zip(is_val) {
        if v {
            val.episodes.push(ep.clone());
        } else {
            train.episodes.push(ep.clone());
        }
    }
    Ok((train, val))
}

pub fn compute_norm_stats(ds: &Dataset) -> Result<NormStats> {
    NormStats::from_states(ds.descriptor.state_dim, ds.descriptor.action_dim, ds.states().map(|s| &s.0[..]))
}
