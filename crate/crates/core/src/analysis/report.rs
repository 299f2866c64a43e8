use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LossHistogramPair, PerExitJs};
use crate::defense::TradeoffTable;
use crate::error::{Error, Result};
use crate::nn::Architecture;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrEntry {
    /// `score`, `gradient` or `label_only`.
    pub attack: String,
    /// `a1_direct_exit`, `a2_timing_exit`, `a3_width`, `a3_shifted`, ...
    pub adversary: String,
    /// `original` (no exit information) or `hybrid`.
    pub variant: String,
    pub asr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitStealSummary {
    pub predicted_n_exits: usize,
    pub accuracy: f64,
    pub n_queries: usize,
    pub noise_sigma: f64,
    pub unobserved_exits: Vec<usize>,
}

/// Everything one audit run measured. Analyses that were not run are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub task: String,
    pub architecture: Architecture,
    pub n_exits: usize,
    pub tau: f64,
    pub vanilla_test_accuracy: Option<f64>,
    pub multi_exit_test_accuracy: Option<f64>,
    pub ops_per_exit: Vec<u64>,
    /// Mean ops per test query under early exit.
    pub mean_ops: Option<f64>,
    pub asr: Vec<AsrEntry>,
    pub overfitting_gap: Option<f64>,
    pub js_overall: Option<f64>,
    pub js_per_exit: Option<PerExitJs>,
    pub nonmember_ratio: Option<Vec<Option<f64>>>,
    pub loss_histograms: Option<LossHistogramPair>,
    pub exit_count: Option<usize>,
    pub exit_steal: Option<ExitStealSummary>,
    pub adaptive_exit_accuracy: Option<f64>,
    pub defense: Option<TradeoffTable>,
}

impl AuditReport {
    pub fn new(task: impl Into<String>, architecture: Architecture, tau: f64, ops_per_exit: Vec<u64>) -> Self {
        AuditReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: task.into(),
            n_exits: architecture.n_exits,
            architecture,
            tau,
            vanilla_test_accuracy: None,
            multi_exit_test_accuracy: None,
            ops_per_exit,
            mean_ops: None,
            asr: Vec::new(),
            overfitting_gap: None,
            js_overall: None,
            js_per_exit: None,
            nonmember_ratio: None,
            loss_histograms: None,
            exit_count: None,
            exit_steal: None,
            adaptive_exit_accuracy: None,
            defense: None,
        }
    }

    pub fn push_asr(&mut self, attack: &str, adversary: &str, variant: &str, asr: f64) {
        self.asr.push(AsrEntry { attack: attack.into(), adversary: adversary.into(), variant: variant.into(), asr });
    }

    pub fn find_asr(&self, attack: &str, adversary: &str, variant: &str) -> Option<f64> {
        self.asr.iter().find(|e| e.attack == attack && e.adversary == adversary && e.variant == variant).map(|e| e.asr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported report schema version {}", self.schema_version)));
        }
        if let Some(e) = self.asr.iter().find(|e| !(0.0..=1.0).contains(&e.asr)) {
            return Err(Error::Config(format!("ASR out of range: {e:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: AuditReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    /// Writes the companion CSVs that exist for this report and returns their
    /// paths.
    pub fn write_figure_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        if let Some(h) = &self.loss_histograms {
            let p = dir.join("fig3_loss_hist.csv");
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["bin", "lower", "upper", "member", "nonmember"])?;
            let n = h.edges.len() - 1;
            for b in 0..=n {
                let (lo, hi) = if b < n { (h.edges[b], h.edges[b + 1]) } else { (h.edges[n], f64::INFINITY) };
                w.write_record([
                    b.to_string(),
                    format!("{lo:?}"),
                    format!("{hi:?}"),
                    format!("{:?}", h.member_hist[b]),
                    format!("{:?}", h.nonmember_hist[b]),
                ])?;
            }
            w.flush()?;
            out.push(p);
        }
        if let Some(js) = &self.js_per_exit {
            let p = dir.join("fig6_js_per_exit.csv");
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["exit", "js", "reliable", "members", "nonmembers"])?;
            for e in 0..js.values.len() {
                w.write_record([
                    e.to_string(),
                    js.values[e].map(|v| format!("{v:?}")).unwrap_or_default(),
                    js.reliable[e].to_string(),
                    js.member_counts[e].to_string(),
                    js.nonmember_counts[e].to_string(),
                ])?;
            }
            w.flush()?;
            out.push(p);
        }
        if let Some(r) = &self.nonmember_ratio {
            let p = dir.join("fig8_ratio.csv");
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["exit", "nonmember_ratio"])?;
            for (e, v) in r.iter().enumerate() {
                w.write_record([e.to_string(), v.map(|v| format!("{v:?}")).unwrap_or_default()])?;
            }
            w.flush()?;
            out.push(p);
        }
        if let Some(t) = &self.defense {
            let p = dir.join("fig16_tradeoff.csv");
            write_tradeoff_csv(t, &p)?;
            out.push(p);
        }
        Ok(out)
    }
}

pub fn write_tradeoff_csv(t: &TradeoffTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sigma", "hybrid_asr", "original_asr", "mean_response_ms", "predicted_n_exits", "exit_accuracy"])?;
    for r in &t.rows {
        w.write_record([
            format!("{:?}", r.sigma),
            format!("{:?}", r.hybrid_asr),
            format!("{:?}", r.original_asr),
            format!("{:?}", r.mean_response_ms),
            r.predicted_n_exits.to_string(),
            format!("{:?}", r.exit_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}
