//! Reverse-mode differentiation by explicit tape replay.
//!
//! Forward calls append a node holding the output value plus whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates parameter gradients into the [`ParamStore`] the tape was
//! recorded against.

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{Dense, Gru, Mlp};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{add_col_sums, matmul_dytx, matmul_dyw, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Dense {
        x: NodeId,
        layer: Dense,
    },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gru {
        x: NodeId,
        h: NodeId,
        cell: Gru,
        z: Vec<T>,
        r: Vec<T>,
        candidate: Vec<T>,
        reset_hidden: Vec<T>,
    },
    Mse {
        pred: NodeId,
        target: Vec<T>,
    },
    Sum(NodeId),
    WeightedSum(Vec<(NodeId, T)>),
    GaussianLogProb {
        mean: NodeId,
        log_std: ParamId,
        sample: Vec<T>,
    },
    GaussianEntropy {
        log_std: ParamId,
    },
    ClippedSurrogate {
        logp: NodeId,
        advantages: Vec<T>,
        clip: T,
        ratios: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation over one [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
    layout: u64,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl<T: Scalar> Tape<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            layout: store.layout_fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check_store(&self, store: &ParamStore<T>) -> Result<()> {
        if store.layout_fingerprint() != self.layout {
            return Err(Error::Contract(
                "tape was recorded against a different parameter layout".into(),
            ));
        }
        Ok(())
    }

    /// Input with no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// A parameter used directly as a value; its gradient flows to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn dense(&mut self, store: &ParamStore<T>, layer: &Dense, x: NodeId) -> Result<NodeId> {
        let y = layer.forward(store, self.value(x))?;
        Ok(self.push(y, Op::Dense { x, layer: *layer }))
    }

    /// Dense layers with `tanh` between them and a linear output.
    pub fn mlp(&mut self, store: &ParamStore<T>, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = mlp.layers.len().saturating_sub(1);
        for (i, layer) in mlp.layers.iter().enumerate() {
            cur = self.dense(store, layer, cur)?;
            if i != last {
                cur = self.tanh(cur);
            }
        }
        Ok(cur)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let y = self.value(a).map(|v| v * c);
        self.push(y, Op::Scale(a, c))
    }

    /// Sum of every element, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::vector(vec![s]), Op::Sum(a))
    }

    pub fn gru(&mut self, store: &ParamStore<T>, cell: &Gru, x: NodeId, h: NodeId) -> Result<NodeId> {
        let (out, act) = cell.forward_with_activations(store, self.value(x), self.value(h))?;
        Ok(self.push(
            out,
            Op::Gru {
                x,
                h,
                cell: *cell,
                z: act.z,
                r: act.r,
                candidate: act.candidate,
                reset_hidden: act.reset_hidden,
            },
        ))
    }

    /// `mean((pred - target)^2)` over every element.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err(
                "mse",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let n = T::of(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::vector(vec![loss]),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `Σ w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(id, w) in terms {
            if self.value(id).len() != 1 {
                return Err(shape_err("weighted_sum", "terms must be scalars"));
            }
            total += w * self.scalar(id);
        }
        Ok(self.push(Tensor::vector(vec![total]), Op::WeightedSum(terms.to_vec())))
    }

    /// Per-row log-density of a diagonal Gaussian with state-independent
    /// log standard deviation: output is `[b, 1]`.
    pub fn gaussian_log_prob(
        &mut self,
        store: &ParamStore<T>,
        mean: NodeId,
        log_std: ParamId,
        sample: &Tensor<T>,
    ) -> Result<NodeId> {
        let m = self.value(mean);
        let ls = store.value(log_std).data();
        let (rows, dim) = (m.rows(), m.cols());
        if ls.len() != dim || sample.len() != m.len() {
            return Err(shape_err(
                "gaussian_log_prob",
                format!("mean {:?}, log_std {}, sample {:?}", m.shape(), ls.len(), sample.shape()),
            ));
        }
        let half_ln_2pi = T::of(0.5 * LN_2PI);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut lp = T::zero();
            for j in 0..dim {
                let sd = ls[j].exp();
                let d = (sample.data()[i * dim + j] - m.data()[i * dim + j]) / sd;
                lp += -T::of(0.5) * d * d - ls[j] - half_ln_2pi;
            }
            out.push(lp);
        }
        let y = Tensor::from_vec(&[rows, 1], out)?;
        Ok(self.push(
            y,
            Op::GaussianLogProb {
                mean,
                log_std,
                sample: sample.data().to_vec(),
            },
        ))
    }

    /// Entropy of the diagonal Gaussian, `Σ (log σ + ½ ln 2πe)`.
    pub fn gaussian_entropy(&mut self, store: &ParamStore<T>, log_std: ParamId) -> NodeId {
        let c = T::of(0.5 * (1.0 + LN_2PI));
        let h = store.value(log_std).data().iter().map(|&l| l + c).sum();
        self.push(Tensor::vector(vec![h]), Op::GaussianEntropy { log_std })
    }

    /// PPO clipped surrogate, returned as a loss to minimise:
    /// `-mean(min(ρ A, clip(ρ, 1-ε, 1+ε) A))` with `ρ = exp(logp - logp_old)`.
    pub fn clipped_surrogate(
        &mut self,
        logp: NodeId,
        logp_old: &[T],
        advantages: &[T],
        clip: T,
    ) -> Result<NodeId> {
        let lp = self.value(logp);
        if lp.len() != logp_old.len() || lp.len() != advantages.len() || lp.is_empty() {
            return Err(shape_err(
                "clipped_surrogate",
                format!("{} log-probs, {} old, {} advantages", lp.len(), logp_old.len(), advantages.len()),
            ));
        }
        let ratios: Vec<T> = lp.data().iter().zip(logp_old).map(|(&a, &b)| (a - b).exp()).collect();
        let n = T::of(ratios.len() as f64);
        let total: T = ratios
            .iter()
            .zip(advantages)
            .map(|(&rho, &a)| surrogate_term(rho, a, clip).0)
            .sum();
        Ok(self.push(
            Tensor::vector(vec![-total / n]),
            Op::ClippedSurrogate {
                logp,
                advantages: advantages.to_vec(),
                clip,
                ratios,
            },
        ))
    }

    /// Backpropagates `d(out)/d(out) = 1` from a scalar node.
    pub fn backward(&self, store: &mut ParamStore<T>, out: NodeId) -> Result<()> {
        if out.0 >= self.nodes.len() || self.value(out).len() != 1 {
            return Err(Error::Contract("backward needs a recorded scalar output node".into()));
        }
        self.backward_with(store, out, Tensor::vector(vec![T::one()]))
    }

    /// Backpropagates an arbitrary output gradient. Parameter gradients are
    /// added to whatever the store already holds.
    pub fn backward_with(&self, store: &mut ParamStore<T>, out: NodeId, grad: Tensor<T>) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} is not on this tape ({} nodes recorded)",
                out.0,
                self.nodes.len()
            )));
        }
        self.check_store(store)?;
        if grad.len() != self.value(out).len() {
            return Err(shape_err("backward", "output gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(grad.into_data());

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    store.grad_mut(*p).data_mut().iter_mut().zip(&dy).for_each(|(g, d)| *g += *d);
                }
                Op::Dense { x, layer } => {
                    let xv = self.value(*x);
                    let rows = xv.rows();
                    {
                        let (_, gw) = store.value_and_grad_mut(layer.w);
                        matmul_dytx(&dy, rows, layer.out, xv.data(), layer.inp, gw.data_mut());
                    }
                    add_col_sums(&dy, layer.out, store.grad_mut(layer.b).data_mut());
                    let mut dx = vec![T::zero(); rows * layer.inp];
                    matmul_dyw(&dy, rows, layer.out, store.value(layer.w).data(), layer.inp, &mut dx, false);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = dy
                        .iter()
                        .zip(node.value.data())
                        .map(|(&d, &y)| d * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.iter().zip(self.value(*b).data()).map(|(&d, &v)| d * v).collect();
                    let db = dy.iter().zip(self.value(*a).data()).map(|(&d, &v)| d * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, dy.iter().map(|&d| d * *c).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![dy[0]; n]);
                }
                Op::Gru {
                    x,
                    h,
                    cell,
                    z,
                    r,
                    candidate,
                    reset_hidden,
                } => {
                    let (dx, dh) = gru_backward(
                        store,
                        cell,
                        self.value(*x),
                        self.value(*h),
                        &dy,
                        z,
                        r,
                        candidate,
                        reset_hidden,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *h, dh);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let k = T::of(2.0) * dy[0] / T::of(p.len() as f64);
                    let dp = p.iter().zip(target).map(|(&a, &b)| k * (a - b)).collect();
                    accumulate(&mut grads, *pred, dp);
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        accumulate(&mut grads, id, vec![w * dy[0]]);
                    }
                }
                Op::GaussianLogProb {
                    mean,
                    log_std,
                    sample,
                } => {
                    let m = self.value(*mean);
                    let dim = m.cols();
                    let ls = store.value(*log_std).data().to_vec();
                    let mut dmean = vec![T::zero(); m.len()];
                    let mut dls = vec![T::zero(); dim];
                    for (i, &g) in dy.iter().enumerate() {
                        for j in 0..dim {
                            let var = (ls[j] + ls[j]).exp();
                            let diff = sample[i * dim + j] - m.data()[i * dim + j];
                            dmean[i * dim + j] = g * diff / var;
                            dls[j] += g * (diff * diff / var - T::one());
                        }
                    }
                    store.grad_mut(*log_std).data_mut().iter_mut().zip(&dls).for_each(|(a, b)| *a += *b);
                    accumulate(&mut grads, *mean, dmean);
                }
                Op::GaussianEntropy { log_std } => {
                    store.grad_mut(*log_std).data_mut().iter_mut().for_each(|g| *g += dy[0]);
                }
                Op::ClippedSurrogate {
                    logp,
                    advantages,
                    clip,
                    ratios,
                } => {
                    let n = T::of(ratios.len() as f64);
                    let dl = ratios
                        .iter()
                        .zip(advantages)
                        .map(|(&rho, &a)| -dy[0] * surrogate_term(rho, a, *clip).1 / n)
                        .collect();
                    accumulate(&mut grads, *logp, dl);
                }
            }
        }
        Ok(())
    }
}

/// Value of `min(ρA, clip(ρ)A)` and its derivative with respect to `log ρ`.
/// The derivative is zero whenever the clipped branch is the binding one.
pub fn surrogate_term<T: Scalar>(rho: T, adv: T, clip: T) -> (T, T) {
    let clipped = rho.max(T::one() - clip).min(T::one() + clip);
    let unclipped_v = rho * adv;
    let clipped_v = clipped * adv;
    if unclipped_v <= clipped_v {
        (unclipped_v, unclipped_v)
    } else {
        (clipped_v, T::zero())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn gru_backward<T: Scalar>(
    store: &mut ParamStore<T>,
    cell: &Gru,
    x: &Tensor<T>,
    h: &Tensor<T>,
    dout: &[T],
    z: &[T],
    r: &[T],
    candidate: &[T],
    reset_hidden: &[T],
) -> (Vec<T>, Vec<T>) {
    let b = x.rows();
    let (n, hd) = (cell.inp, cell.hidden);
    let hv = h.data();
    let one = T::one();

    let mut dx = vec![T::zero(); b * n];
    let mut dh: Vec<T> = dout.iter().zip(z).map(|(&d, &z)| d * (one - z)).collect();

    // candidate path
    let da_h: Vec<T> = (0..b * hd)
        .map(|i| dout[i] * z[i] * (one - candidate[i] * candidate[i]))
        .collect();
    // update gate path
    let da_z: Vec<T> = (0..b * hd)
        .map(|i| dout[i] * (candidate[i] - hv[i]) * z[i] * (one - z[i]))
        .collect();

    let gate_grads = |store: &mut ParamStore<T>, w: ParamId, u: ParamId, bias: ParamId, da: &[T], hin: &[T]| {
        matmul_dytx(da, b, hd, x.data(), n, store.grad_mut(w).data_mut());
        matmul_dytx(da, b, hd, hin, hd, store.grad_mut(u).data_mut());
        add_col_sums(da, hd, store.grad_mut(bias).data_mut());
    };

    gate_grads(store, cell.w_h, cell.u_h, cell.b_h, &da_h, reset_hidden);
    matmul_dyw(&da_h, b, hd, store.value(cell.w_h).data(), n, &mut dx, true);
    let mut d_reset_hidden = vec![T::zero(); b * hd];
    matmul_dyw(&da_h, b, hd, store.value(cell.u_h).data(), hd, &mut d_reset_hidden, false);

    let da_r: Vec<T> = (0..b * hd)
        .map(|i| {
            dh[i] += d_reset_hidden[i] * r[i];
            d_reset_hidden[i] * hv[i] * r[i] * (one - r[i])
        })
        .collect();

    gate_grads(store, cell.w_r, cell.u_r, cell.b_r, &da_r, hv);
    matmul_dyw(&da_r, b, hd, store.value(cell.w_r).data(), n, &mut dx, true);
    matmul_dyw(&da_r, b, hd, store.value(cell.u_r).data(), hd, &mut dh, true);

    gate_grads(store, cell.w_z, cell.u_z, cell.b_z, &da_z, hv);
    matmul_dyw(&da_z, b, hd, store.value(cell.w_z).data(), n, &mut dx, true);
    matmul_dyw(&da_z, b, hd, store.value(cell.u_z).data(), hd, &mut dh, true);

    (dx, dh)
}
