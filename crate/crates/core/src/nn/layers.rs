use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::params::{ParamId, ParamStore, ParamStoreBuilder};
use crate::nn::tensor::{matmul_xwt, Tensor};
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Treats `x` as a batch `[b, in]`; a plain vector is a batch of one.
fn batch_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    (x.rows(), x.cols())
}

/// `y = x W^T + b` for a batch `x: [b, in]`, `W: [out, in]`, `b: [out]`.
pub fn dense_forward<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 {
        return Err(shape_err("dense", format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (rows, xin) = batch_dims(x);
    if xin != inp {
        return Err(shape_err("dense", format!("input width {xin} but weight expects {inp}")));
    }
    if b.len() != out {
        return Err(shape_err("dense", format!("bias length {} but {out} outputs", b.len())));
    }
    let mut y = vec![T::zero(); rows * out];
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(b.data());
    }
    matmul_xwt(x.data(), rows, inp, w.data(), out, &mut y, true);
    let shape = if x.shape().len() == 1 { vec![out] } else { vec![rows, out] };
    Tensor::from_vec(&shape, y)
}

/// Handle to the weight and bias of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    pub fn declare<T: Scalar, R: Rng + ?Sized>(
        builder: &mut ParamStoreBuilder<T>,
        name: &str,
        inp: usize,
        out: usize,
        init_scale: f64,
        rng: &mut R,
    ) {
        builder.add_scaled_weight(format!("{name}.w"), out, inp, init_scale, rng);
        builder.add_zeros(format!("{name}.b"), &[out]);
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.value(w).shape();
        Ok(Self {
            w,
            b,
            out: shape[0],
            inp: shape[1],
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense_forward(store.value(self.w), store.value(self.b), x)
    }
}

/// Handles to the nine tensors of a GRU cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub inp: usize,
    pub hidden: usize,
}

/// Intermediate activations of one GRU step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruActivations<T> {
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub candidate: Vec<T>,
    pub reset_hidden: Vec<T>,
}

impl Gru {
    pub fn declare<T: Scalar, R: Rng + ?Sized>(
        builder: &mut ParamStoreBuilder<T>,
        name: &str,
        inp: usize,
        hidden: usize,
        rng: &mut R,
    ) {
        for gate in ["z", "r", "h"] {
            builder.add_weight(format!("{name}.w_{gate}"), hidden, inp, rng);
            builder.add_weight(format!("{name}.u_{gate}"), hidden, hidden, rng);
            builder.add_zeros(format!("{name}.b_{gate}"), &[hidden]);
        }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let id = |k: &str| store.id(&format!("{name}.{k}"));
        let w_z = id("w_z")?;
        let shape = store.value(w_z).shape();
        let (hidden, inp) = (shape[0], shape[1]);
        Ok(Self {
            w_z,
            u_z: id("u_z")?,
            b_z: id("b_z")?,
            w_r: id("w_r")?,
            u_r: id("u_r")?,
            b_r: id("b_r")?,
            w_h: id("w_h")?,
            u_h: id("u_h")?,
            b_h: id("b_h")?,
            inp,
            hidden,
        })
    }

    pub(crate) fn check_dims<T: Scalar>(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<usize> {
        let (bx, ix) = batch_dims(x);
        let (bh, ih) = batch_dims(h);
        if ix != self.inp {
            return Err(shape_err("gru", format!("input width {ix}, cell expects {}", self.inp)));
        }
        if ih != self.hidden {
            return Err(shape_err("gru", format!("hidden width {ih}, cell expects {}", self.hidden)));
        }
        if bx != bh {
            return Err(shape_err("gru", format!("batch of x is {bx} but batch of h is {bh}")));
        }
        Ok(bx)
    }

    /// Standard GRU update:
    /// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        h: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_with_activations(store, x, h)?.0)
    }

    pub(crate) fn forward_with_activations<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        h: &Tensor<T>,
    ) -> Result<(Tensor<T>, GruActivations<T>)> {
        let b = self.check_dims(x, h)?;
        let (n, hd) = (self.inp, self.hidden);
        let gate = |w: ParamId, u: ParamId, bias: ParamId, hin: &[T]| {
            let mut a = vec![T::zero(); b * hd];
            for row in a.chunks_exact_mut(hd) {
                row.copy_from_slice(store.value(bias).data());
            }
            matmul_xwt(x.data(), b, n, store.value(w).data(), hd, &mut a, true);
            matmul_xwt(hin, b, hd, store.value(u).data(), hd, &mut a, true);
            a
        };
        let mut z = gate(self.w_z, self.u_z, self.b_z, h.data());
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = gate(self.w_r, self.u_r, self.b_r, h.data());
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let reset_hidden: Vec<T> = r.iter().zip(h.data()).map(|(&r, &h)| r * h).collect();
        let mut candidate = gate(self.w_h, self.u_h, self.b_h, &reset_hidden);
        candidate.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<T> = h
            .data()
            .iter()
            .zip(&z)
            .zip(&candidate)
            .map(|((&h, &z), &c)| (T::one() - z) * h + z * c)
            .collect();
        let out = Tensor::from_vec(h.shape(), out)?;
        Ok((
            out,
            GruActivations {
                z,
                r,
                candidate,
                reset_hidden,
            },
        ))
    }
}

/// Free-function form of [`Gru::forward`].
pub fn gru_cell_forward<T: Scalar>(
    store: &ParamStore<T>,
    cell: &Gru,
    x: &Tensor<T>,
    h: &Tensor<T>,
) -> Result<Tensor<T>> {
    cell.forward(store, x, h)
}

/// Stack of dense layers with `tanh` between them and a linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`. The last layer's weights are scaled by
    /// `out_scale` at initialization.
    pub fn declare<T: Scalar, R: Rng + ?Sized>(
        builder: &mut ParamStoreBuilder<T>,
        name: &str,
        sizes: &[usize],
        out_scale: f64,
        rng: &mut R,
    ) {
        let last = sizes.len() - 2;
        for (i, pair) in sizes.windows(2).enumerate() {
            let scale = if i == last { out_scale } else { 1.0 };
            Dense::declare(builder, &format!("{name}.l{i}"), pair[0], pair[1], scale, rng);
        }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Dense::bind(store, &format!("{name}.l{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn inp(&self) -> usize {
        self.layers[0].inp
    }

    pub fn out(&self) -> usize {
        self.layers[self.layers.len() - 1].out
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(store, &cur)?;
            if i != last {
                cur.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity_and_zero_weight() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::vector(vec![0.0, 0.0]);
        let y = dense_forward(&eye, &zero_b, &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let w0 = Tensor::<f64>::zeros(&[2, 5]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let y = dense_forward(&w0, &b, &Tensor::vector(vec![7.0, -1.0, 0.5, 2.0, 9.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_shape_mismatch_is_an_error() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert!(dense_forward(&w, &b, &Tensor::vector(vec![1.0, 2.0])).is_err());
        let bad_b = Tensor::vector(vec![0.0; 3]);
        assert!(dense_forward(&w, &bad_b, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn dense_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (out, inp) = (5, 7);
        let w: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..inp).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = dense_forward(
            &Tensor::matrix(out, inp, w.clone()).unwrap(),
            &Tensor::vector(b.clone()),
            &Tensor::vector(x.clone()),
        )
        .unwrap();
        for o in 0..out {
            let mut acc = b[o];
            for i in 0..inp {
                acc += w[o * inp + i] * x[i];
            }
            assert!((y.data()[o] - acc).abs() < 1e-13);
        }
    }

    fn zero_gru(inp: usize, hidden: usize) -> (ParamStore<f64>, Gru) {
        let mut b = ParamStoreBuilder::new();
        for g in ["z", "r", "h"] {
            b.add_zeros(format!("g.w_{g}"), &[hidden, inp]);
            b.add_zeros(format!("g.u_{g}"), &[hidden, hidden]);
            b.add_zeros(format!("g.b_{g}"), &[hidden]);
        }
        let s = b.build().unwrap();
        let g = Gru::bind(&s, "g").unwrap();
        (s, g)
    }

    #[test]
    fn gru_with_zero_params_halves_hidden() {
        let (s, g) = zero_gru(3, 2);
        let h = Tensor::vector(vec![0.4, -0.6]);
        let out = g.forward(&s, &Tensor::vector(vec![5.0, -2.0, 1.0]), &h).unwrap();
        assert_eq!(out.data(), &[0.2, -0.3]);
        let zero = g.forward(&s, &Tensor::vector(vec![1.0, 1.0, 1.0]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_matches_straight_line_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (inp, hd) = (3, 4);
        let mut b = ParamStoreBuilder::<f64>::new();
        Gru::declare(&mut b, "g", inp, hd, &mut rng);
        let mut s = b.build().unwrap();
        // non-zero biases too
        for name in ["g.b_z", "g.b_r", "g.b_h"] {
            let id = s.id(name).unwrap();
            for v in s.value_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let g = Gru::bind(&s, "g").unwrap();
        let x: Vec<f64> = (0..inp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = g
            .forward(&s, &Tensor::vector(x.clone()), &Tensor::vector(h.clone()))
            .unwrap();

        let p = |n: &str| s.value(s.id(&format!("g.{n}")).unwrap()).data().to_vec();
        let (wz, uz, bz) = (p("w_z"), p("u_z"), p("b_z"));
        let (wr, ur, br) = (p("w_r"), p("u_r"), p("b_r"));
        let (wh, uh, bh) = (p("w_h"), p("u_h"), p("b_h"));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        for i in 0..hd {
            let mut az = bz[i];
            let mut ar = br[i];
            for j in 0..inp {
                az += wz[i * inp + j] * x[j];
                ar += wr[i * inp + j] * x[j];
            }
            for j in 0..hd {
                az += uz[i * hd + j] * h[j];
                ar += ur[i * hd + j] * h[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        for i in 0..hd {
            let mut ah = bh[i];
            for j in 0..inp {
                ah += wh[i * inp + j] * x[j];
            }
            for j in 0..hd {
                ah += uh[i * hd + j] * r[j] * h[j];
            }
            let expect = (1.0 - z[i]) * h[i] + z[i] * ah.tanh();
            assert!((got.data()[i] - expect).abs() < 1e-13, "component {i}");
        }
    }

    #[test]
    fn gru_dimension_errors() {
        let (s, g) = zero_gru(3, 2);
        assert!(g.forward(&s, &Tensor::vector(vec![0.0; 2]), &Tensor::zeros(&[2])).is_err());
        assert!(g.forward(&s, &Tensor::vector(vec![0.0; 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
