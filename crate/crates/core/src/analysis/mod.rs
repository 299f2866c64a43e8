//! Overfitting diagnostics: accuracy gap, member/non-member loss histograms,
//! Jensen-Shannon divergence overall and per exit, and exit populations.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{write_tradeoff_csv, AsrEntry, AuditReport, ExitStealSummary, REPORT_SCHEMA_VERSION};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::MultiExitModel;

pub const DEFAULT_BINS: usize = 100;
/// Added to every bin before renormalizing. Small enough that fully disjoint
/// samples still score within 1e-9 of the maximum.
pub const DEFAULT_EPSILON: f64 = 1e-15;
/// Exit buckets with fewer samples on either side are flagged.
pub const MIN_RELIABLE: usize = 10;

/// Two normalized histograms over shared bins; the last bin collects values
/// above `edges[n_bins]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHistogramPair {
    /// `n_bins + 1` edges of the regular bins.
    pub edges: Vec<f64>,
    /// `n_bins + 1` masses each, overflow last.
    pub member_hist: Vec<f64>,
    pub nonmember_hist: Vec<f64>,
    pub epsilon: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    crate::timing::quantile_sorted(sorted, q)
}

/// Bins over `[lo, p99]` of the pooled values, `lo` being 0 for non-negative
/// data and the pooled minimum otherwise, plus one overflow bin.
pub fn histogram_pair(p: &[f64], q: &[f64], n_bins: usize, epsilon: f64) -> Result<LossHistogramPair> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("histogram sample"));
    }
    if n_bins == 0 || !(epsilon >= 0.0) {
        return Err(Error::Config("histograms need at least one bin and a non-negative epsilon".into()));
    }
    if p.iter().chain(q).any(|v| !v.is_finite()) {
        return Err(Error::Config("histogram values must be finite".into()));
    }
    let mut pooled: Vec<f64> = p.iter().chain(q).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let lo = if pooled[0] >= 0.0 { 0.0 } else { pooled[0] };
    let mut hi = percentile(&pooled, 0.99);
    if hi <= lo {
        hi = pooled[pooled.len() - 1];
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let bin = |v: f64| {
        if v > hi {
            n_bins
        } else {
            (((v - lo) / width) as usize).min(n_bins - 1)
        }
    };
    let hist = |s: &[f64]| {
        let mut h = vec![0.0; n_bins + 1];
        for &v in s {
            h[bin(v)] += 1.0;
        }
        let n = s.len() as f64;
        let total = 1.0 + epsilon * h.len() as f64;
        h.iter().map(|c| (c / n + epsilon) / total).collect::<Vec<f64>>()
    };
    Ok(LossHistogramPair { edges, member_hist: hist(p), nonmember_hist: hist(q), epsilon })
}

/// Base-2 Jensen-Shannon divergence of two discrete distributions.
pub fn js_of_distributions(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, (&pp, &qq))| x * (x / ((pp + qq) / 2.0)).log2())
            .sum()
    };
    (0.5 * kl(p) + 0.5 * kl(q)).clamp(0.0, 1.0)
}

/// JS divergence of two samples over shared smoothed histograms.
pub fn js_divergence(p: &[f64], q: &[f64], n_bins: usize, epsilon: f64) -> Result<f64> {
    let h = histogram_pair(p, q, n_bins, epsilon)?;
    Ok(js_of_distributions(&h.member_hist, &h.nonmember_hist))
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Train accuracy minus test accuracy of the early-exit predictions.
pub fn overfitting_gap(model: &MultiExitModel, train: &TabularDataset, test: &TabularDataset) -> Result<f64> {
    Ok(model.early_exit_accuracy(train.view(), &train.labels)? - model.early_exit_accuracy(test.view(), &test.labels)?)
}

/// Per-sample loss at the exit that fired, for a balanced member/non-member
/// stack (members first, each side truncated to the smaller size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossView {
    pub loss: Vec<f64>,
    pub exit: Vec<usize>,
    pub member: Vec<bool>,
    pub n_exits: usize,
}

impl LossView {
    pub fn from_model(model: &MultiExitModel, members: &TabularDataset, nonmembers: &TabularDataset) -> Result<Self> {
        let ds = crate::attacks::build_attack_dataset(
            model,
            members,
            nonmembers,
            &crate::attacks::ExitSource::None,
            Default::default(),
        )?;
        Ok(LossView { loss: ds.loss, exit: ds.taken_exit, member: ds.member, n_exits: model.n_exits() })
    }

    fn split(&self, keep: impl Fn(usize) -> bool) -> (Vec<f64>, Vec<f64>) {
        let mut m = Vec::new();
        let mut nm = Vec::new();
        for r in (0..self.loss.len()).filter(|&r| keep(r)) {
            if self.member[r] {
                m.push(self.loss[r]);
            } else {
                nm.push(self.loss[r]);
            }
        }
        (m, nm)
    }

    pub fn histograms(&self) -> Result<LossHistogramPair> {
        let (m, nm) = self.split(|_| true);
        histogram_pair(&m, &nm, DEFAULT_BINS, DEFAULT_EPSILON)
    }

    pub fn js(&self) -> Result<f64> {
        let (m, nm) = self.split(|_| true);
        js_divergence(&m, &nm, DEFAULT_BINS, DEFAULT_EPSILON)
    }

    pub fn per_exit_js(&self) -> PerExitJs {
        let mut out = PerExitJs::default();
        for e in 0..self.n_exits {
            let (m, nm) = self.split(|r| self.exit[r] == e);
            out.member_counts.push(m.len());
            out.nonmember_counts.push(nm.len());
            out.reliable.push(m.len() >= MIN_RELIABLE && nm.len() >= MIN_RELIABLE);
            out.values.push(js_divergence(&m, &nm, DEFAULT_BINS, DEFAULT_EPSILON).ok());
        }
        out
    }

    /// Share of non-members among the samples leaving at each exit.
    pub fn nonmember_ratio(&self) -> Vec<Option<f64>> {
        nonmember_ratio(&self.exit, &self.member, self.n_exits)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerExitJs {
    /// Absent where one side of the bucket is empty.
    pub values: Vec<Option<f64>>,
    pub reliable: Vec<bool>,
    pub member_counts: Vec<usize>,
    pub nonmember_counts: Vec<usize>,
}

impl PerExitJs {
    /// Spearman correlation of JS with depth over the reliable buckets.
    pub fn depth_correlation(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .values
            .iter()
            .zip(&self.reliable)
            .enumerate()
            .filter_map(|(e, (v, &ok))| v.filter(|_| ok).map(|v| (e as f64, v)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let (d, v): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        spearman(&d, &v)
    }
}

pub fn per_exit_js(model: &MultiExitModel, members: &TabularDataset, nonmembers: &TabularDataset) -> Result<PerExitJs> {
    Ok(LossView::from_model(model, members, nonmembers)?.per_exit_js())
}

/// Non-member share per exit; `None` for exits nobody took.
pub fn nonmember_ratio(exits: &[usize], member: &[bool], n_exits: usize) -> Vec<Option<f64>> {
    let mut total = vec![0usize; n_exits];
    let mut non = vec![0usize; n_exits];
    for (&e, &m) in exits.iter().zip(member) {
        total[e] += 1;
        non[e] += usize::from(!m);
    }
    total.iter().zip(&non).map(|(&t, &k)| (t > 0).then(|| k as f64 / t as f64)).collect()
}

pub fn nonmember_ratio_per_exit(
    model: &MultiExitModel,
    members: &TabularDataset,
    nonmembers: &TabularDataset,
) -> Result<Vec<Option<f64>>> {
    Ok(LossView::from_model(model, members, nonmembers)?.nonmember_ratio())
}
