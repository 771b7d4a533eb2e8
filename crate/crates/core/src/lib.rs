pub mod dataset;
pub mod envs;
pub mod error;
mod formats;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod selfmodel;
pub mod tasks;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

/// Self-model in double precision.
pub type SelfModelF64 = selfmodel::SelfModel<f64>;
/// Self-model in single precision.
pub type SelfModelF32 = selfmodel::SelfModel<f32>;
pub type PolicyF64 = policy::Policy<f64>;
pub type PolicyF32 = policy::Policy<f32>;
pub type ValueFnF64 = policy::ValueFn<f64>;
pub type PolicyCheckpointF64 = policy::PolicyCheckpoint<f64>;
pub type ParamStoreF64 = nn::ParamStore<f64>;
pub type ParamStoreF32 = nn::ParamStore<f32>;
pub type TensorF64 = nn::Tensor<f64>;
pub type TensorF32 = nn::Tensor<f32>;
