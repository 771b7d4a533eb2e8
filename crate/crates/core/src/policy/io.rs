//! `SMP1` policy checkpoints: metadata, configuration and parameter
//! shapes in the JSON header, then the policy parameters followed by the
//! critic parameters (each in sorted-name order) as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Policy, PpoConfig, ReturnStats, ValueFn};
use crate::envs::EnvId;
use crate::error::{FormatError, Result};
use crate::formats;
use crate::nn::{ParamStore, ParamStoreBuilder, Tensor};
use crate::scalar::Scalar;
use crate::tasks::TaskId;

pub const SMP_MAGIC: &[u8; 4] = b"SMP1";

/// A trained actor-critic pair with the context it was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint<T: Scalar = f64> {
    pub env_id: EnvId,
    pub task_id: TaskId,
    /// Steps taken in the training environment (model or real).
    pub env_steps: usize,
    /// Whether training used the learned model instead of the simulator.
    pub trained_in_model: bool,
    pub config: PpoConfig,
    pub policy: Policy<T>,
    pub value: ValueFn<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SmpHeader {
    env_id: EnvId,
    task_id: TaskId,
    state_dim: usize,
    action_dim: usize,
    env_steps: usize,
    trained_in_model: bool,
    config: PpoConfig,
    return_stats: ReturnStats,
    policy_params: Vec<(String, Vec<usize>)>,
    value_params: Vec<(String, Vec<usize>)>,
}

fn shapes<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Vec<usize>)> {
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).shape().to_vec()))
        .collect()
}

fn rebuild<T: Scalar>(spec: &[(String, Vec<usize>)], flat: &[f64]) -> Result<ParamStore<T>> {
    let mut b = ParamStoreBuilder::<T>::new();
    let mut off = 0;
    for (name, shape) in spec {
        let len: usize = shape.iter().product();
        b.add(name.clone(), Tensor::from_vec(shape, flat[off..off + len].iter().map(|&v| T::of(v)).collect())?);
        off += len;
    }
    b.build()
}

fn numel(spec: &[(String, Vec<usize>)]) -> usize {
    spec.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

impl<T: Scalar> PolicyCheckpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SmpHeader {
            env_id: self.env_id,
            task_id: self.task_id,
            state_dim: self.policy.state_dim(),
            action_dim: self.policy.action_dim(),
            env_steps: self.env_steps,
            trained_in_model: self.trained_in_model,
            config: self.config.clone(),
            return_stats: self.value.returns,
            policy_params: shapes(&self.policy.params),
            value_params: shapes(&self.value.params),
        };
        let json = serde_json::to_vec(&header).expect("policy header serializes");
        let payload = self
            .policy
            .params
            .flatten()
            .into_iter()
            .chain(self.value.params.flatten())
            .map(|v| v.as_f64());
        formats::encode(SMP_MAGIC, &json, payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = formats::decode(bytes, SMP_MAGIC, "SMP")?;
        let header: SmpHeader = formats::parse_header(h)?;
        let n_pi = numel(&header.policy_params);
        let n_v = numel(&header.value_params);
        let flat = formats::read_f64s(payload, n_pi + n_v, "policy parameters")?;
        let depth = header.config.hidden_sizes.len() + 1;
        let invalid = |e: crate::Error| -> crate::Error {
            FormatError::Header(format!("parameters do not form a policy: {e}")).into()
        };
        let policy = Policy::from_params(rebuild(&header.policy_params, &flat[..n_pi])?, depth).map_err(invalid)?;
        let mut value = ValueFn::from_params(rebuild(&header.value_params, &flat[n_pi..])?, depth).map_err(invalid)?;
        value.returns = header.return_stats;
        for (what, expected, found) in [
            ("policy state dimension", header.state_dim, policy.state_dim()),
            ("policy action dimension", header.action_dim, policy.action_dim()),
            ("critic state dimension", header.state_dim, value.state_dim()),
        ] {
            if expected != found {
                return Err(FormatError::DimMismatch {
                    what: what.into(),
                    expected,
                    found,
                }
                .into());
            }
        }
        Ok(Self {
            env_id: header.env_id,
            task_id: header.task_id,
            env_steps: header.env_steps,
            trained_in_model: header.trained_in_model,
            config: header.config,
            policy,
            value,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        formats::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
