//! `SMM1` model files: dimensions, configuration and normalization
//! statistics in the JSON header, then every parameter in sorted-name
//! order as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SelfModel, SelfModelConfig};
use crate::dataset::NormStats;
use crate::envs::EnvId;
use crate::error::{FormatError, Result};
use crate::formats;
use crate::nn::{ParamStoreBuilder, Tensor};
use crate::scalar::Scalar;

pub const SMM_MAGIC: &[u8; 4] = b"SMM1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SmmHeader {
    env_id: Option<EnvId>,
    state_dim: usize,
    action_dim: usize,
    hidden_size: usize,
    decoder_hidden: usize,
    config: SelfModelConfig,
    norm: NormStats,
    params: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> SelfModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SmmHeader {
            env_id: self.env_id,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            hidden_size: self.hidden_size(),
            decoder_hidden: self.decoder.layers[0].out,
            config: self.config.clone(),
            norm: self.norm.clone(),
            params: self
                .params
                .ids()
                .map(|id| (self.params.name(id).to_string(), self.params.value(id).shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("model header serializes");
        formats::encode(SMM_MAGIC, &json, self.params.flatten().into_iter().map(|v| v.as_f64()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = formats::decode(bytes, SMM_MAGIC, "SMM")?;
        let header: SmmHeader = formats::parse_header(h)?;
        if header.norm.state_dim() != header.state_dim {
            return Err(FormatError::DimMismatch {
                what: "normalization statistics".into(),
                expected: header.state_dim,
                found: header.norm.state_dim(),
            }
            .into());
        }
        if header.config.hidden_size != header.hidden_size {
            return Err(FormatError::DimMismatch {
                what: "hidden size".into(),
                expected: header.hidden_size,
                found: header.config.hidden_size,
            }
            .into());
        }
        let count: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let flat = formats::read_f64s(payload, count, "model parameters")?;
        let mut b = ParamStoreBuilder::<T>::new();
        let mut off = 0;
        for (name, shape) in &header.params {
            let len: usize = shape.iter().product();
            let data = flat[off..off + len].iter().map(|&v| T::of(v)).collect();
            b.add(name.clone(), Tensor::from_vec(shape, data)?);
            off += len;
        }
        let params = b.build()?;
        SelfModel::from_params(
            params,
            header.state_dim,
            header.action_dim,
            header.config,
            header.norm,
            header.env_id,
        )
        .map_err(|e| FormatError::Header(format!("parameters do not form a self-model: {e}")).into())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        formats::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
