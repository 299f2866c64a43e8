use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::{argmax_rows, train_classifier, Mlp, Standardizer};
use super::records::sorted_scores;
use crate::error::{Error, Result};
use crate::nn::{MultiExitModel, TrainConfig};
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitCount {
    /// Largest observed exit index plus one.
    pub n_exits: usize,
    /// How many probes left at each observed index.
    pub histogram: Vec<usize>,
}

impl ExitCount {
    /// Indices below the maximum that no probe reached.
    pub fn unobserved(&self) -> Vec<usize> {
        self.histogram.iter().enumerate().filter(|(_, &c)| c == 0).map(|(e, _)| e).collect()
    }
}

/// Counts exits from the exit indices a served model reports for `probes`.
pub fn count_exits(model: &MultiExitModel, probes: ArrayView2<f64>) -> Result<ExitCount> {
    if probes.nrows() == 0 {
        return Err(Error::Empty("probe set"));
    }
    let exits: Vec<usize> = model.predict_early_batch(probes)?.into_iter().map(|p| p.exit).collect();
    Ok(count_from_indices(&exits))
}

pub fn count_from_indices(exits: &[usize]) -> ExitCount {
    let n = exits.iter().max().map_or(0, |m| m + 1);
    let mut histogram = vec![0; n];
    for &e in exits {
        histogram[e] += 1;
    }
    ExitCount { n_exits: n, histogram }
}

/// Predicts the exit depth from the sorted prediction score alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitClassifier {
    pub n_exits: usize,
    pub standardizer: Standardizer,
    /// Four dense layers.
    pub mlp: Mlp,
    pub holdout_accuracy: f64,
    /// Share of the most frequent exit in the holdout part.
    pub majority_baseline: f64,
}

impl ExitClassifier {
    pub fn predict(&self, scores: ArrayView2<f64>) -> Vec<usize> {
        let z = self.standardizer.apply(sorted_scores(scores).view());
        argmax_rows(&self.mlp.forward(z.view()))
    }
}

/// Trains on (sorted score, taken exit) pairs of `shadow` over `probes`,
/// holding out the last fifth for the reported accuracy.
pub fn adaptive_exit_classifier(
    shadow: &MultiExitModel,
    probes: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<ExitClassifier> {
    let n = probes.nrows();
    if n < 10 {
        return Err(Error::TooFewSamples { needed: 10, got: n });
    }
    let preds = shadow.predict_early_batch(probes)?;
    let exits: Vec<usize> = preds.iter().map(|p| p.exit).collect();
    let k = shadow.n_classes();
    let scores = ndarray::Array2::from_shape_fn((n, k), |(r, c)| preds[r].probs[c]);
    let cut = n * 4 / 5;
    let sorted = sorted_scores(scores.view());
    let standardizer = Standardizer::fit(sorted.slice(ndarray::s![..cut, ..]));
    let z = standardizer.apply(sorted.view());
    let n_exits = shadow.n_exits();
    let mut mlp = Mlp::new(&[k, 128, 64, 32, n_exits], &mut rng_from(derive_seed(cfg.seed, "exit-classifier")));
    train_classifier(&mut mlp, z.slice(ndarray::s![..cut, ..]), &exits[..cut], cfg)?;
    let held = z.select(Axis(0), &(cut..n).collect::<Vec<_>>());
    let pred = argmax_rows(&mlp.forward(held.view()));
    let hits = pred.iter().zip(&exits[cut..]).filter(|(a, b)| a == b).count();
    let mut freq = vec![0usize; n_exits];
    for &e in &exits[cut..] {
        freq[e] += 1;
    }
    let held_n = (n - cut) as f64;
    Ok(ExitClassifier {
        n_exits,
        standardizer,
        mlp,
        holdout_accuracy: hits as f64 / held_n,
        majority_baseline: *freq.iter().max().expect("non-empty") as f64 / held_n,
    })
}
