use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MultiExitModel;
use crate::seed::rng_from;

/// Buckets with fewer shadow samples than this use the global threshold.
pub const MIN_BUCKET: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub n_directions: usize,
    /// Upper end of the magnitude search.
    pub s_max: f64,
    pub bisection_steps: usize,
    pub seed: u64,
}

impl PerturbConfig {
    /// `s_max` five times the feature-space standard deviation of `reference`.
    pub fn for_data(reference: ArrayView2<f64>, seed: u64) -> Self {
        PerturbConfig { n_directions: 10, s_max: 5.0 * feature_space_sd(reference), bisection_steps: 20, seed }
    }

    fn directions(&self, dim: usize) -> Array2<f64> {
        let mut rng = rng_from(self.seed);
        let mut d = Array2::from_shape_fn((self.n_directions, dim), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in d.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        d
    }
}

/// Square root of the summed per-feature variances.
pub fn feature_space_sd(x: ArrayView2<f64>) -> f64 {
    x.var_axis(Axis(0), 0.0).sum().sqrt()
}

/// Mean over random unit directions of the smallest scale along that
/// direction that changes the early-exit label, found by bisection on
/// `[0, s_max]` (`s_max` when the label never changes).
pub fn perturbation_magnitudes(model: &MultiExitModel, x: ArrayView2<f64>, cfg: &PerturbConfig) -> Result<Vec<f64>> {
    if cfg.n_directions == 0 || !(cfg.s_max > 0.0) {
        return Err(Error::Config("perturbation needs at least one direction and a positive s_max".into()));
    }
    let labels = |pts: &Array2<f64>| -> Result<Vec<usize>> {
        Ok(model.predict_early_batch(pts.view())?.into_iter().map(|p| p.label).collect())
    };
    let n = x.nrows();
    let base = labels(&x.to_owned())?;
    let dirs = cfg.directions(x.ncols());
    let mut total = vec![0.0; n];
    for dir in dirs.rows() {
        let shifted = |rows: &[usize], scale: &[f64]| -> Array2<f64> {
            let mut p = x.select(Axis(0), rows);
            for (mut r, &s) in p.rows_mut().into_iter().zip(scale) {
                r.scaled_add(s, &dir);
            }
            p
        };
        let all: Vec<usize> = (0..n).collect();
        let at_max = labels(&shifted(&all, &vec![cfg.s_max; n]))?;
        let active: Vec<usize> = all.iter().copied().filter(|&i| at_max[i] != base[i]).collect();
        for &i in &all {
            if at_max[i] == base[i] {
                total[i] += cfg.s_max;
            }
        }
        let mut lo = vec![0.0; n];
        let mut hi = vec![cfg.s_max; n];
        for _ in 0..cfg.bisection_steps {
            if active.is_empty() {
                break;
            }
            let mids: Vec<f64> = active.iter().map(|&i| 0.5 * (lo[i] + hi[i])).collect();
            let got = labels(&shifted(&active, &mids))?;
            for ((&i, &m), &l) in active.iter().zip(&mids).zip(&got) {
                if l != base[i] {
                    hi[i] = m;
                } else {
                    lo[i] = m;
                }
            }
        }
        for &i in &active {
            total[i] += hi[i];
        }
    }
    Ok(total.into_iter().map(|t| t / cfg.n_directions as f64).collect())
}

pub fn perturbation_magnitude(model: &MultiExitModel, x: &[f64], cfg: &PerturbConfig) -> Result<f64> {
    let v = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
    Ok(perturbation_magnitudes(model, v, cfg)?[0])
}

/// Threshold `t` maximizing the accuracy of "member iff value > t", with the
/// accuracy it reaches. Candidates are midpoints between distinct values plus
/// one cut below and one at the top.
pub fn best_threshold(values: &[f64], member: &[bool]) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let n = values.len() as f64;
    let members = member.iter().filter(|&&m| m).count();
    // everything above the cut is called a member
    let mut correct = members as i64;
    let lowest = values[idx[0]];
    let mut best = (if lowest > 0.0 { lowest / 2.0 } else { lowest - 1.0 }, correct as f64 / n);
    let mut k = 0;
    while k < idx.len() {
        let v = values[idx[k]];
        while k < idx.len() && values[idx[k]] == v {
            correct += if member[idx[k]] { -1 } else { 1 };
            k += 1;
        }
        let cut = if k < idx.len() { 0.5 * (v + values[idx[k]]) } else { v };
        let acc = correct as f64 / n;
        if acc > best.1 {
            best = (cut, acc);
        }
    }
    best
}

/// Fitted label-only decision rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOnlyDecision {
    pub global: f64,
    /// One threshold per exit depth when fitted per exit.
    pub per_exit: Option<Vec<f64>>,
    /// Exit buckets that fell back to the global threshold.
    pub fallback: Vec<usize>,
    pub perturb: PerturbConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOnlyResult {
    /// Accuracy over the whole balanced evaluation set, i.e. the per-exit
    /// accuracies weighted by exit population.
    pub asr: f64,
    /// Accuracy within each exit bucket, absent for empty buckets.
    pub per_exit_asr: Vec<Option<f64>>,
    /// Unweighted mean of the non-empty bucket accuracies.
    pub mean_exit_asr: f64,
}

impl LabelOnlyDecision {
    /// Thresholds from shadow magnitudes. With `exits`, one threshold per
    /// exit depth maximizes the accuracy within that bucket.
    pub fn fit(
        magnitudes: &[f64],
        member: &[bool],
        exits: Option<(&[usize], usize)>,
        perturb: PerturbConfig,
    ) -> Result<Self> {
        if magnitudes.is_empty() {
            return Err(Error::Empty("shadow magnitudes"));
        }
        let (global, _) = best_threshold(magnitudes, member);
        let mut fallback = Vec::new();
        let per_exit = exits.map(|(ex, n_exits)| {
            (0..n_exits)
                .map(|e| {
                    let rows: Vec<usize> = (0..ex.len()).filter(|&r| ex[r].min(n_exits - 1) == e).collect();
                    if rows.len() < MIN_BUCKET {
                        fallback.push(e);
                        return global;
                    }
                    let v: Vec<f64> = rows.iter().map(|&r| magnitudes[r]).collect();
                    let m: Vec<bool> = rows.iter().map(|&r| member[r]).collect();
                    best_threshold(&v, &m).0
                })
                .collect()
        });
        Ok(LabelOnlyDecision { global, per_exit, fallback, perturb })
    }

    pub fn evaluate(&self, magnitudes: &[f64], member: &[bool], exits: Option<(&[usize], usize)>) -> LabelOnlyResult {
        let n_buckets = match (&self.per_exit, exits) {
            (Some(t), _) => t.len(),
            (None, Some((_, n))) => n,
            (None, None) => 1,
        };
        let bucket = |r: usize| exits.map(|(ex, _)| ex[r].min(n_buckets - 1)).unwrap_or(0);
        let mut hits = vec![0usize; n_buckets];
        let mut counts = vec![0usize; n_buckets];
        for r in 0..magnitudes.len() {
            let b = bucket(r);
            let t = self.per_exit.as_ref().map(|p| p[b]).unwrap_or(self.global);
            counts[b] += 1;
            hits[b] += usize::from((magnitudes[r] > t) == member[r]);
        }
        let per_exit_asr: Vec<Option<f64>> =
            hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64)).collect();
        let present: Vec<f64> = per_exit_asr.iter().flatten().copied().collect();
        LabelOnlyResult {
            asr: hits.iter().sum::<usize>() as f64 / magnitudes.len().max(1) as f64,
            mean_exit_asr: present.iter().sum::<f64>() / present.len().max(1) as f64,
            per_exit_asr,
        }
    }
}

/// Magnitudes and membership bits of a balanced member/non-member sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOnlyInputs {
    pub magnitudes: Vec<f64>,
    pub member: Vec<bool>,
    /// Early exit each row took on the queried model.
    pub taken_exit: Vec<usize>,
}

/// Magnitudes for the first `n` rows of each of `members` and `nonmembers`.
pub fn label_only_inputs(
    model: &MultiExitModel,
    members: ArrayView2<f64>,
    nonmembers: ArrayView2<f64>,
    n: usize,
    cfg: &PerturbConfig,
) -> Result<LabelOnlyInputs> {
    let n = n.min(members.nrows()).min(nonmembers.nrows());
    if n == 0 {
        return Err(Error::Empty("label-only evaluation set"));
    }
    let x = ndarray::concatenate(Axis(0), &[members.slice(ndarray::s![..n, ..]), nonmembers.slice(ndarray::s![..n, ..])])
        .expect("same width");
    let magnitudes = perturbation_magnitudes(model, x.view(), cfg)?;
    let taken_exit = model.predict_early_batch(x.view())?.into_iter().map(|p| p.exit).collect();
    Ok(LabelOnlyInputs { magnitudes, member: (0..2 * n).map(|i| i < n).collect(), taken_exit })
}

/// Label-only attack: thresholds fitted on the shadow model's magnitudes,
/// applied to the target's. With `per_exit`, both sides are bucketed by exit
/// depth; `target_exits` overrides the target's true exits (e.g. with
/// exits recovered from timing).
pub fn run_label_only_attack(
    shadow: &LabelOnlyInputs,
    target: &LabelOnlyInputs,
    n_exits: usize,
    per_exit: bool,
    target_exits: Option<&[usize]>,
    perturb: PerturbConfig,
) -> Result<(LabelOnlyDecision, LabelOnlyResult)> {
    let shadow_exits = per_exit.then_some((shadow.taken_exit.as_slice(), n_exits));
    let decision = LabelOnlyDecision::fit(&shadow.magnitudes, &shadow.member, shadow_exits, perturb)?;
    let ex = target_exits.unwrap_or(&target.taken_exit);
    let result = decision.evaluate(&target.magnitudes, &target.member, per_exit.then_some((ex, n_exits)));
    Ok((decision, result))
}
