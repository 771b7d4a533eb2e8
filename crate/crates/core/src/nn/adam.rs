use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f64> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update from the gradients held in `store`,
    /// which are zeroed afterwards. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer state belongs to a different store".into()));
        }
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {:?}", store.name(id))));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        let one = T::one();
        let c1 = one - b1.powi(self.t as i32);
        let c2 = one - b2.powi(self.t as i32);
        for id in store.ids() {
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    state.step(store, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStoreBuilder;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut b = ParamStoreBuilder::new();
        b.add("w", Tensor::vector(vec![w]));
        b.build().unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        let mut st = AdamState::new(&s);
        s.grad_mut(id).data_mut()[0] = 0.37;
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        st.step(&mut s, &cfg).unwrap();
        let moved = s.value(id).data()[0];
        assert!((moved + 0.01).abs() < 1e-9, "moved {moved}");
        assert_eq!(s.grad(id).data()[0], 0.0);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).data()[0], 1.5);
    }

    #[test]
    fn quadratic_decreases_each_step() {
        // f(w) = w^2, gradient 2w; hand trace from w0 = 1 with lr 0.1
        let mut s = scalar_store(1.0);
        let id = s.id("w").unwrap();
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut prev = 1.0;
        let mut trace = vec![];
        for _ in 0..3 {
            let w = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] = 2.0 * w;
            st.step(&mut s, &cfg).unwrap();
            let now = s.value(id).data()[0];
            assert!(now < prev);
            prev = now;
            trace.push(now);
        }
        // independent scalar recomputation of the same three updates
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((trace[t as usize - 1] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let id = s.id("w").unwrap();
        let mut st = AdamState::new(&s);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = st.step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(st.steps(), 0);
    }
}
