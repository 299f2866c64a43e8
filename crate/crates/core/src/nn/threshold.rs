use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::model::{argmax, MultiExitModel};
use crate::error::{Error, Result};

pub const DEFAULT_SLACK: f64 = 0.005;

/// Candidate thresholds `0, 0.05, ..., 1.0`.
pub fn tau_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub accuracy: f64,
    /// False when no grid point met the bar and 1.0 was returned as fallback.
    pub satisfied: bool,
}

/// Smallest grid threshold whose early-exit holdout accuracy is within
/// `slack` of the vanilla reference accuracy.
pub fn select_threshold(
    model: &MultiExitModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    reference_accuracy: f64,
    slack: f64,
) -> Result<ThresholdChoice> {
    if labels.is_empty() {
        return Err(Error::Empty("holdout set"));
    }
    let out = model.forward_batch(x)?;
    let n = labels.len() as f64;
    let preds: Vec<Vec<usize>> = (0..out.n_exits())
        .map(|e| out.probs[e].rows().into_iter().map(argmax).collect())
        .collect();
    let accuracy_at = |tau: f64| {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| preds[out.taken_exit(r, tau)][r] == y)
            .count();
        hits as f64 / n
    };
    for tau in tau_grid() {
        let acc = accuracy_at(tau);
        if acc >= reference_accuracy - slack {
            return Ok(ThresholdChoice { tau, accuracy: acc, satisfied: true });
        }
    }
    Ok(ThresholdChoice { tau: 1.0, accuracy: accuracy_at(1.0), satisfied: false })
}
