//! Differentiable building blocks: tensors, parameters, layers, a recording
//! tape, Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{dense_forward, gru_cell_forward, sigmoid, Dense, Gru, Mlp};
pub use params::{ParamId, ParamStore, ParamStoreBuilder};
pub use tape::{surrogate_term, NodeId, Tape};
pub use tensor::Tensor;
