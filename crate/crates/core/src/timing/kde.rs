//! One-dimensional clustering by the minima of a Gaussian kernel density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeClustering {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    /// Density at each grid point.
    pub density: Vec<f64>,
    /// Sorted cut points between clusters.
    pub minima: Vec<f64>,
    /// Cluster index of every input value; 0 is the fastest cluster.
    pub clusters: Vec<usize>,
}

impl KdeClustering {
    pub fn n_clusters(&self) -> usize {
        self.minima.len() + 1
    }

    pub fn assign(&self, t: f64) -> usize {
        self.minima.partition_point(|&m| m < t)
    }
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^(-1/5)`. The second value
/// is true when the IQR vanished and the standard deviation was used alone.
pub fn silverman_bandwidth(sorted: &[f64]) -> (f64, bool) {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let degenerate = iqr <= 0.0;
    let spread = if degenerate { sd } else { sd.min(iqr / 1.34) };
    (0.9 * spread * n.powf(-0.2), degenerate)
}

fn log_density(sorted: &[f64], h: f64, x: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let terms: Vec<f64> = sorted
        .iter()
        .map(|&v| {
            let z = (x - v) / h;
            let t = -0.5 * z * z;
            max = max.max(t);
            t
        })
        .collect();
    let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + s.ln() - (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// A valley shallower than this fraction of its lower neighbouring peak is
/// treated as sampling wiggle rather than a boundary.
pub const MAX_VALLEY_RATIO: f64 = 0.9;
/// Stricter valley ratio for cuts found when re-clustering a part. A part's
/// own bandwidth is narrow enough to expose tail wiggles of a single noisy
/// mode, while the gaps between exact repeated values stay nearly empty.
pub const REFINE_VALLEY_RATIO: f64 = 0.5;
/// Clusters holding less than this share of the values are merged into a
/// neighbour unless they are an exact repeated value.
pub const MIN_CLUSTER_SHARE: f64 = 0.01;

struct Pass {
    bandwidth: f64,
    grid: Vec<f64>,
    log_density: Vec<f64>,
    cuts: Vec<f64>,
    degenerate: bool,
}

fn local_minima(ld: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < ld.len() {
        if ld[i] < ld[i - 1] {
            // walk across a flat bottom, if any
            let mut j = i;
            while j + 1 < ld.len() && ld[j + 1] == ld[j] {
                j += 1;
            }
            if j + 1 < ld.len() && ld[j + 1] > ld[j] {
                out.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Drops minima that are shallow or that isolate a thinly supported cluster.
fn prune(sorted: &[f64], grid: &[f64], ld: &[f64], mut cuts: Vec<usize>, max_ratio: f64) -> Vec<usize> {
    let min_count = ((MIN_CLUSTER_SHARE * sorted.len() as f64).ceil() as usize).max(2);
    loop {
        if cuts.is_empty() {
            return cuts;
        }
        let mut bounds = vec![0];
        bounds.extend(cuts.iter().copied());
        bounds.push(grid.len() - 1);
        let peaks: Vec<f64> =
            bounds.windows(2).map(|w| ld[w[0]..=w[1]].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        // log ratio of valley to the lower adjacent peak
        let depth: Vec<f64> = cuts.iter().enumerate().map(|(k, &c)| ld[c] - peaks[k].min(peaks[k + 1])).collect();
        let mut members: Vec<&[f64]> = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0;
        for &c in cuts.iter().chain(std::iter::once(&(grid.len() - 1))) {
            let end = if c == grid.len() - 1 { sorted.len() } else { start + sorted[start..].partition_point(|&v| v < grid[c]) };
            members.push(&sorted[start..end]);
            start = end;
        }
        let thin = |m: &[f64]| m.len() < min_count && !(m.len() >= 2 && m[0] == m[m.len() - 1]);
        let thin_cluster = (0..members.len()).filter(|&k| thin(members[k])).min_by_key(|&k| members[k].len());
        let drop = if let Some(k) = thin_cluster {
            // merge across the shallower of its two boundaries
            match (k.checked_sub(1), (k < cuts.len()).then_some(k)) {
                (Some(l), Some(r)) => if depth[l] >= depth[r] { l } else { r },
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (None, None) => return cuts,
            }
        } else {
            let (k, &d) = depth.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
            if d <= max_ratio.ln() {
                return cuts;
            }
            k
        };
        cuts.remove(drop);
    }
}

fn single_pass(sorted: &[f64], max_ratio: f64) -> Option<Pass> {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return None;
    }
    let (h, degenerate) = silverman_bandwidth(sorted);
    if !(h > 0.0) {
        return None;
    }
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| a + step * i as f64).collect();
    // log scale keeps well-separated modes from underflowing into flat zeros
    let ld: Vec<f64> = grid.iter().map(|&x| log_density(sorted, h, x)).collect();
    let kept = prune(sorted, &grid, &ld, local_minima(&ld), max_ratio);
    let cuts = kept.into_iter().map(|i| grid[i]).collect();
    Some(Pass { bandwidth: h, grid, log_density: ld, cuts, degenerate })
}

/// Cut points for `sorted`. When the IQR vanished (most mass sits on a few
/// exact values) the standard-deviation bandwidth can smear a small cluster
/// into a large neighbour, so each resulting interval is re-clustered with its
/// own bandwidth.
fn refine(sorted: &[f64], depth: usize) -> Vec<f64> {
    let ratio = if depth == 0 { MAX_VALLEY_RATIO } else { REFINE_VALLEY_RATIO };
    let Some(pass) = single_pass(sorted, ratio) else { return Vec::new() };
    // a split at this scale may hide finer modes inside each part, which a
    // bandwidth fitted to the part alone can resolve
    if (!pass.degenerate && pass.cuts.is_empty()) || depth > 16 {
        return pass.cuts;
    }
    let mut out = Vec::new();
    let mut start = 0;
    let bounds: Vec<f64> = pass.cuts.iter().copied().chain(std::iter::once(f64::INFINITY)).collect();
    for (k, &b) in bounds.iter().enumerate() {
        let end = start + sorted[start..].partition_point(|&v| v < b);
        let part = &sorted[start..end];
        if part.len() >= 2 && part.len() < sorted.len() {
            out.extend(refine(part, depth + 1));
        }
        if k < pass.cuts.len() {
            out.push(b);
        }
        start = end;
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Clusters one-dimensional values at the interior local minima of a
/// Gaussian KDE evaluated on a 512-point grid over `[min - 3h, max + 3h]`.
pub fn kde_cluster(times: &[f64]) -> Result<KdeClustering> {
    if times.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: times.len() });
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("times must be finite".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = single_pass(&sorted, MAX_VALLEY_RATIO);
    let minima = refine(&sorted, 0);
    let (bandwidth, grid, density) = match top {
        Some(p) => (p.bandwidth, p.grid, p.log_density.iter().map(|l| l.exp()).collect()),
        None => (0.0, vec![sorted[0]], vec![f64::INFINITY]),
    };
    let mut out = KdeClustering { bandwidth, grid, density, minima, clusters: Vec::new() };
    out.clusters = times.iter().map(|&t| out.assign(t)).collect();
    Ok(out)
}
