//! How many fewer real transitions the self-model pipeline needs than the
//! baseline to reach a target return.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio of the baseline's crossing budget to the self-model pipeline's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ReductionFactor {
    Finite(f64),
    /// The pipeline reached the target but the baseline never did within
    /// its largest budget: the factor is unbounded.
    BaselineNeverReached,
    /// The baseline reached the target but the pipeline never did: the
    /// factor is zero.
    ModelNeverReached,
}

impl ReductionFactor {
    /// Numeric reading: `∞` and `0` for the two one-sided outcomes.
    pub fn value(self) -> f64 {
        match self {
            ReductionFactor::Finite(v) => v,
            ReductionFactor::BaselineNeverReached => f64::INFINITY,
            ReductionFactor::ModelNeverReached => 0.0,
        }
    }
}

/// Smallest budget at which the piecewise-linear interpolation of
/// `(budget, mean return)` points first reaches `target`. Points need not be
/// sorted. A curve that starts at or above the target crosses at its first
/// budget; nothing is extrapolated past either end.
pub fn crossing_budget(points: &[(usize, f64)], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, r)| r.is_finite())
        .map(|&(b, r)| (b as f64, r))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = pts.first()?;
    if first.1 >= target {
        return Some(first.0);
    }
    pts.windows(2).find_map(|w| {
        let ((b0, r0), (b1, r1)) = (w[0], w[1]);
        (r1 >= target).then(|| b0 + (target - r0) / (r1 - r0) * (b1 - b0))
    })
}

/// `baseline_crossing / model_crossing` for `target`; an error when neither
/// method reaches it.
pub fn data_reduction_factor(model: &[(usize, f64)], baseline: &[(usize, f64)], target: f64) -> Result<ReductionFactor> {
    match (crossing_budget(model, target), crossing_budget(baseline, target)) {
        (Some(m), Some(b)) => Ok(ReductionFactor::Finite(b / m)),
        (Some(_), None) => Ok(ReductionFactor::BaselineNeverReached),
        (None, Some(_)) => Ok(ReductionFactor::ModelNeverReached),
        (None, None) => Err(Error::NotComparable(format!(
            "neither method reaches a return of {target}"
        ))),
    }
}
