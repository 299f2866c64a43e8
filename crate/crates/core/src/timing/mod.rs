//! Simulated inference-time side channel, exit-depth stealing by KDE
//! clustering, and the query-count planner for noisy channels.

mod channel;
mod kde;
mod planner;

use std::path::Path;

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use channel::{
    estimate_sigma, measure, truncated_positive_normal, TimingModel, DEFAULT_BASE_MS, DEFAULT_MS_PER_OP,
};
pub use kde::{kde_cluster, silverman_bandwidth, KdeClustering, GRID_POINTS};
pub use planner::{plan_queries, z_critical, QueryPlan};

pub(crate) use kde::quantile_sorted;

use crate::error::{Error, Result};
use crate::nn::MultiExitModel;

pub const DEFAULT_MAX_CLUSTERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub sample_id: usize,
    pub mean_time_ms: f64,
    pub n_queries: usize,
    /// Ground truth, kept for scoring only.
    pub true_exit: usize,
    pub predicted_exit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTrace {
    pub records: Vec<TimingRecord>,
}

impl TimingTrace {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_time_ms).collect()
    }

    pub fn true_exits(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.true_exit).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "mean_time_ms", "n_queries", "predicted_exit", "true_exit"])?;
        for r in &self.records {
            w.write_record([
                r.sample_id.to_string(),
                format!("{:?}", r.mean_time_ms),
                r.n_queries.to_string(),
                r.predicted_exit.map(|e| e.to_string()).unwrap_or_default(),
                r.true_exit.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Averaged times for every row of `x`, with the true exits recorded.
pub fn measure_batch<R: Rng + ?Sized>(
    timing: &TimingModel,
    model: &MultiExitModel,
    x: ArrayView2<'_, f64>,
    n_queries: usize,
    rng: &mut R,
) -> Result<TimingTrace> {
    let preds = model.predict_early_batch(x)?;
    let mut records = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        records.push(TimingRecord {
            sample_id: i,
            mean_time_ms: timing.measure_exit(p.exit, n_queries, rng)?,
            n_queries,
            true_exit: p.exit,
            predicted_exit: None,
        });
    }
    Ok(TimingTrace { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StealResult {
    pub predicted_n_exits: usize,
    pub accuracy: f64,
    pub clustering: KdeClustering,
    pub trace: TimingTrace,
    /// True exits that no probe reached; the recovered count may be short.
    pub unobserved_exits: Vec<usize>,
}

impl StealResult {
    pub fn predicted_exits(&self) -> Vec<usize> {
        self.clustering.clusters.clone()
    }
}

/// Clusters an already measured trace and scores the recovered exit depths.
pub fn steal_from_trace(mut trace: TimingTrace, n_exits_truth: usize, max_clusters: usize) -> Result<StealResult> {
    let clustering = kde_cluster(&trace.times())?;
    if clustering.n_clusters() > max_clusters {
        return Err(Error::ClusteringFailed { found: clustering.n_clusters(), max: max_clusters });
    }
    let mut hit = 0usize;
    let mut seen = vec![false; n_exits_truth];
    for (r, &c) in trace.records.iter_mut().zip(&clustering.clusters) {
        r.predicted_exit = Some(c);
        hit += usize::from(c == r.true_exit);
        if r.true_exit < n_exits_truth {
            seen[r.true_exit] = true;
        }
    }
    let unobserved_exits = seen.iter().enumerate().filter(|(_, &s)| !s).map(|(e, _)| e).collect();
    Ok(StealResult {
        predicted_n_exits: clustering.n_clusters(),
        accuracy: hit as f64 / trace.records.len() as f64,
        clustering,
        trace,
        unobserved_exits,
    })
}

/// Measures every probe, clusters the averaged times and maps cluster rank to
/// exit depth.
pub fn steal_exit_depths<R: Rng + ?Sized>(
    timing: &TimingModel,
    model: &MultiExitModel,
    probes: ArrayView2<'_, f64>,
    n_queries: usize,
    rng: &mut R,
) -> Result<StealResult> {
    let trace = measure_batch(timing, model, probes, n_queries, rng)?;
    steal_from_trace(trace, model.n_exits(), DEFAULT_MAX_CLUSTERS)
}
