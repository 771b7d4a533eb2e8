use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T = f64> {
    pub max_rel_error: T,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients with central differences for every scalar
/// parameter in `store`.
///
/// `loss` must evaluate the objective at the store's current values and
/// accumulate its gradient into the store. The relative error of one entry
/// is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; the largest
/// one is reported. Values and gradients are restored before returning.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, eps: T, mut loss: F) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>) -> Result<T>,
{
    let saved_grads: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();
    loss(store)?;
    let analytic: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();

    let floor = T::of(1e-8);
    let two = T::of(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let up = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig - eps;
            let down = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (two * eps);
            let a = analytic[id.index()].data()[k];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(saved_grads) {
        *store.grad_mut(id) = g;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStoreBuilder;
    use crate::nn::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut b = ParamStoreBuilder::new();
        b.add("w", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let mut s = b.build().unwrap();
        let coeffs = [1.5, -0.25, 4.0];
        let rep = grad_check(&mut s, 1e-5, |s| {
            let id = s.id("w")?;
            let w = s.value(id).data().to_vec();
            for (g, c) in s.grad_mut(id).data_mut().iter_mut().zip(coeffs) {
                *g += c;
            }
            Ok(w.iter().zip(coeffs).map(|(w, c)| w * c).sum())
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 3);
        assert!(s.grad(s.id("w").unwrap()).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut b = ParamStoreBuilder::new();
        b.add("w", Tensor::vector(vec![2.0]));
        let mut s = b.build().unwrap();
        let rep = grad_check(&mut s, 1e-5, |s| {
            let id = s.id("w")?;
            let w = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] += 3.0 * w; // true derivative of w^2 is 2w
            Ok(w * w)
        })
        .unwrap();
        assert!(rep.max_rel_error > 0.3);
        assert_eq!(rep.worst_param, "w");
    }
}
