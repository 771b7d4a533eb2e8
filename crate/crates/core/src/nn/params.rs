use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with one gradient buffer each, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f64> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

/// Collects parameters before their ids are fixed.
#[derive(Debug, Default)]
pub struct ParamStoreBuilder<T = f64> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStoreBuilder<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> &mut Self {
        self.entries.push((name.into(), value));
        self
    }

    /// Weight matrix `[out, inp]` drawn from `U(-1/sqrt(inp), 1/sqrt(inp))`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        inp: usize,
        rng: &mut R,
    ) -> &mut Self {
        self.add_scaled_weight(name, out, inp, 1.0, rng)
    }

    pub fn add_scaled_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        inp: usize,
        scale: f64,
        rng: &mut R,
    ) -> &mut Self {
        let bound = scale / (inp.max(1) as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        let t = Tensor::from_vec(&[out, inp], data).expect("sized by construction");
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> &mut Self {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn build(self) -> Result<ParamStore<T>> {
        let mut entries = self.entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Contract(format!(
                    "duplicate parameter name {:?}",
                    pair[0].0
                )));
            }
        }
        let grads = entries.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
        let (names, values) = entries.into_iter().unzip();
        Ok(ParamStore {
            names,
            values,
            grads,
        })
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map(ParamId)
            .map_err(|_| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&Tensor<T>, &mut Tensor<T>) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(Tensor::fill_zero);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> T {
        self.grads.iter().map(Tensor::sum_sq).sum::<T>().sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Hash of names and shapes; two stores with the same layout agree.
    pub fn layout_fingerprint(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            eat(n.as_bytes());
            for d in v.shape() {
                eat(&d.to_le_bytes());
            }
        }
        h
    }

    /// All parameter values flattened in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_follow_name_order() {
        let mut b = ParamStoreBuilder::<f64>::new();
        b.add_zeros("zeta", &[2]).add_zeros("alpha", &[3]);
        let s = b.build().unwrap();
        assert_eq!(s.id("alpha").unwrap().index(), 0);
        assert_eq!(s.id("zeta").unwrap().index(), 1);
        assert!(s.id("beta").is_err());
        assert_eq!(s.grad(s.id("alpha").unwrap()).shape(), &[3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = ParamStoreBuilder::<f64>::new();
        b.add_zeros("w", &[1]).add_zeros("w", &[1]);
        assert!(b.build().is_err());
    }

    #[test]
    fn weight_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamStoreBuilder::<f64>::new();
        b.add_weight("w", 16, 25, &mut rng);
        let s = b.build().unwrap();
        let w = s.value(s.id("w").unwrap());
        assert!(w.max_abs() <= 0.2);
        assert!(w.max_abs() > 0.1);
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut b = ParamStoreBuilder::<f64>::new();
        b.add_zeros("a", &[2]);
        let mut s = b.build().unwrap();
        let id = s.id("a").unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamStoreBuilder::<f64>::new();
        b.add_weight("w", 3, 2, &mut rng).add_zeros("b", &[3]);
        let s = b.build().unwrap();
        let mut t = s.clone();
        t.value_mut(t.id("w").unwrap()).fill_zero();
        t.load_flat(&s.flatten()).unwrap();
        assert_eq!(s, t);
    }
}
