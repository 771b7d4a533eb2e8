//! Recurrent self-model: a corrector GRU that folds observed states into the
//! hidden state, a predictor GRU that advances it with actions alone, and a
//! decoder shared by both that maps the hidden state back to a state.
//!
//! States are z-scored with the training set's [`NormStats`] inside the
//! model; callers always pass and receive raw states.

use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::envs::{Action, EnvId, EnvState};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Gru, Mlp, ParamStore, ParamStoreBuilder, Tensor};
use crate::rng;
use crate::scalar::Scalar;

mod io;
mod train;

pub use io::SMM_MAGIC;
pub use train::{
    accumulate_gradients, compute_losses, evaluate_horizons, persistence_horizons, train, EpochRecord, HorizonReport, LossBreakdown,
    TrainHistory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfModelConfig {
    pub hidden_size: usize,
    pub decoder_hidden: usize,
    /// Training window length.
    pub n: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Step between the starts of consecutive training windows.
    pub stride: usize,
    pub val_stride: usize,
    pub grad_clip: f64,
    pub w_recon: f64,
    pub w_single: f64,
    pub w_seq: f64,
}

impl Default for SelfModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 128,
            decoder_hidden: 128,
            n: 100,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            stride: 10,
            val_stride: 10,
            grad_clip: 5.0,
            w_recon: 1.0,
            w_single: 1.0,
            w_seq: 1.0,
        }
    }
}

impl SelfModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size == 0 || self.decoder_hidden == 0 {
            return bad("hidden_size and decoder_hidden must be at least 1");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.batch_size == 0 || self.stride == 0 || self.val_stride == 0 {
            return bad("batch_size, stride and val_stride must be at least 1");
        }
        let w = [self.w_recon, self.w_single, self.w_seq];
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return bad("loss weights must be non-negative and not all zero");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Recurrent state carried between model calls.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T = f64> {
    pub h: Vec<T>,
    /// Prediction step at which the corrector last consumed an observation.
    pub grounded_at: usize,
    /// Number of predictor steps taken since the seed observation.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfModel<T: Scalar = f64> {
    pub(crate) params: ParamStore<T>,
    pub(crate) corrector: Gru,
    pub(crate) predictor: Gru,
    pub(crate) decoder: Mlp,
    pub norm: NormStats,
    pub config: SelfModelConfig,
    pub env_id: Option<EnvId>,
    state_dim: usize,
    action_dim: usize,
}

const DECODER_DEPTH: usize = 2;

impl<T: Scalar> SelfModel<T> {
    /// Freshly initialized model. Weight matrices are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases are zero.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &SelfModelConfig,
        norm: NormStats,
        env_id: Option<EnvId>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if norm.state_dim() != state_dim {
            return Err(shape_err("self_model", format!("norm stats have {} dims, model {state_dim}", norm.state_dim())));
        }
        let mut r = rng::stream(seed, "model.init");
        let mut b = ParamStoreBuilder::new();
        Gru::declare(&mut b, "corrector", state_dim, config.hidden_size, &mut r);
        Gru::declare(&mut b, "predictor", action_dim, config.hidden_size, &mut r);
        Mlp::declare(
            &mut b,
            "decoder",
            &[config.hidden_size, config.decoder_hidden, state_dim],
            1.0,
            &mut r,
        );
        let params = b.build()?;
        Self::from_params(params, state_dim, action_dim, config.clone(), norm, env_id)
    }

    pub(crate) fn from_params(
        params: ParamStore<T>,
        state_dim: usize,
        action_dim: usize,
        config: SelfModelConfig,
        norm: NormStats,
        env_id: Option<EnvId>,
    ) -> Result<Self> {
        let corrector = Gru::bind(&params, "corrector")?;
        let predictor = Gru::bind(&params, "predictor")?;
        let decoder = Mlp::bind(&params, "decoder", DECODER_DEPTH)?;
        if corrector.hidden != predictor.hidden || decoder.inp() != corrector.hidden {
            return Err(shape_err("self_model", "corrector, predictor and decoder disagree on hidden size"));
        }
        if corrector.inp != state_dim || predictor.inp != action_dim || decoder.out() != state_dim {
            return Err(shape_err("self_model", "parameter shapes disagree with state/action dims"));
        }
        Ok(Self {
            params,
            corrector,
            predictor,
            decoder,
            norm,
            config,
            env_id,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.corrector.hidden
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Scalar>(&self) -> SelfModel<U> {
        SelfModel {
            params: self.params.cast(),
            corrector: self.corrector,
            predictor: self.predictor,
            decoder: self.decoder.clone(),
            norm: self.norm.clone(),
            config: self.config.clone(),
            env_id: self.env_id,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    pub fn zero_hidden(&self) -> HiddenState<T> {
        HiddenState {
            h: vec![T::zero(); self.hidden_size()],
            grounded_at: 0,
            step: 0,
        }
    }

    pub(crate) fn normalized(&self, s: &[f64]) -> Vec<T> {
        self.norm.apply(s).into_iter().map(T::of).collect()
    }

    fn decode(&self, h: &Tensor<T>) -> Result<EnvState> {
        let z = self.decoder.forward(&self.params, h)?;
        let z: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
        Ok(EnvState(self.norm.invert(&z)))
    }

    fn check_state(&self, s: &EnvState) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(shape_err("self_model", format!("state has {} dims, model expects {}", s.len(), self.state_dim)));
        }
        Ok(())
    }

    fn check_hidden(&self, h: &HiddenState<T>) -> Result<()> {
        if h.h.len() != self.hidden_size() {
            return Err(shape_err("self_model", format!("hidden state has {} dims, model uses {}", h.h.len(), self.hidden_size())));
        }
        Ok(())
    }

    /// Folds an observed state into the hidden state (zero vector when
    /// `h` is `None`) and decodes the corrector's output as a reconstruction.
    pub fn correct(&self, h: Option<&HiddenState<T>>, s: &EnvState) -> Result<(HiddenState<T>, EnvState)> {
        self.check_state(s)?;
        let prev = match h {
            Some(h) => {
                self.check_hidden(h)?;
                h.clone()
            }
            None => self.zero_hidden(),
        };
        let x = Tensor::vector(self.normalized(s));
        let hv = Tensor::vector(prev.h);
        let out = self.corrector.forward(&self.params, &x, &hv)?;
        let recon = self.decode(&out)?;
        Ok((
            HiddenState {
                h: out.into_data(),
                grounded_at: prev.step,
                step: prev.step,
            },
            recon,
        ))
    }

    /// Advances the hidden state with an action and decodes the predicted
    /// next state. No observation is consumed.
    pub fn predict(&self, h: &HiddenState<T>, a: &Action) -> Result<(HiddenState<T>, EnvState)> {
        self.check_hidden(h)?;
        if a.len() != self.action_dim {
            return Err(shape_err("self_model", format!("action has {} dims, model expects {}", a.len(), self.action_dim)));
        }
        let x = Tensor::vector(a.iter().map(|&v| T::of(v)).collect());
        let hv = Tensor::vector(h.h.clone());
        let out = self.predictor.forward(&self.params, &x, &hv)?;
        let s_hat = self.decode(&out)?;
        Ok((
            HiddenState {
                h: out.into_data(),
                grounded_at: h.grounded_at,
                step: h.step + 1,
            },
            s_hat,
        ))
    }

    /// Corrector update from a mid-rollout observation.
    pub fn reground(&self, h: &HiddenState<T>, s_observed: &EnvState) -> Result<HiddenState<T>> {
        Ok(self.correct(Some(h), s_observed)?.0)
    }

    /// Predicted states for `actions`, seeded only by `s0`.
    pub fn rollout_open_loop(&self, s0: &EnvState, actions: &[Action]) -> Result<Vec<EnvState>> {
        if actions.is_empty() {
            self.check_state(s0)?;
            return Ok(Vec::new());
        }
        let (mut h, _) = self.correct(None, s0)?;
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            let (next, s_hat) = self.predict(&h, a)?;
            h = next;
            out.push(s_hat);
        }
        Ok(out)
    }

    /// Rollout that regrounds on `observed[i]` before predicting step
    /// `i + 1` (closed loop). `observed.len()` must equal `actions.len()`,
    /// with `observed[0]` the seed state.
    pub fn rollout_closed_loop(&self, observed: &[EnvState], actions: &[Action]) -> Result<Vec<EnvState>> {
        if observed.len() != actions.len() {
            return Err(Error::Contract("closed-loop rollout needs one observation per action".into()));
        }
        let mut h: Option<HiddenState<T>> = None;
        let mut out = Vec::with_capacity(actions.len());
        for (s, a) in observed.iter().zip(actions) {
            let grounded = self.correct(h.as_ref(), s)?.0;
            let (next, s_hat) = self.predict(&grounded, a)?;
            h = Some(next);
            out.push(s_hat);
        }
        Ok(out)
    }
}
