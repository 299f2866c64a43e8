//! Response-time defenses: keyed per-sample delays and delaying everything to
//! the final exit, plus the privacy/latency trade-off sweep.

use std::fmt;

use hkdf::Hkdf;
use ndarray::{concatenate, s, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};

use crate::attacks::{build_attack_dataset, AttackModel, ExitSource, RecordOptions};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::MultiExitModel;
use crate::timing::{steal_from_trace, TimingModel, TimingRecord, TimingTrace};

/// ASR margin for locating the trade-off crossing.
pub const CROSSING_EPSILON: f64 = 0.01;
pub const DEFAULT_SECRET_ENV: &str = "EXITAUDIT_TIMEGUARD_SECRET";

/// 256-bit secret. It has no serialization and prints redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretSeed([u8; 32]);

impl fmt::Debug for SecretSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretSeed(<redacted>)")
    }
}

impl SecretSeed {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SecretSeed(bytes)
    }

    /// 64 hex digits.
    pub fn from_hex(s: &str) -> Result<Self> {
        let v = hex::decode(s.trim()).map_err(|e| Error::Config(format!("secret seed is not hex: {e}")))?;
        let bytes: [u8; 32] =
            v.try_into().map_err(|v: Vec<u8>| Error::Config(format!("secret seed must be 32 bytes, got {}", v.len())))?;
        Ok(SecretSeed(bytes))
    }

    pub fn from_env(var: &str) -> Result<Self> {
        let s = std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        Self::from_hex(&s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    GaussianDelay,
    MaxDelay,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGuardConfig {
    pub sigma: f64,
    pub mode: DefenseMode,
    pub secret: SecretSeed,
}

impl TimeGuardConfig {
    pub fn new(sigma: f64, mode: DefenseMode, secret: SecretSeed) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidSigma(sigma));
        }
        Ok(TimeGuardConfig { sigma, mode, secret })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayedPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub delay_time: f64,
}

/// SHA-512 over the row-major little-endian bytes of the sample.
pub fn sample_hash(x: &[f64]) -> [u8; 64] {
    let mut h = Sha512::new();
    for v in x {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// HKDF-SHA512 with the sample hash as salt and the secret as key material.
fn sample_key(hash: &[u8; 64], secret: &SecretSeed) -> [u8; 32] {
    let hk = Hkdf::<Sha512>::new(Some(hash), &secret.0);
    let mut okm = [0u8; 32];
    hk.expand(b"timeguard delay", &mut okm).expect("32 bytes is a valid output length");
    okm
}

/// Keyed standard-normal draw for `x`.
pub fn keyed_normal(x: &[f64], secret: &SecretSeed) -> f64 {
    let mut rng = ChaCha8Rng::from_seed(sample_key(&sample_hash(x), secret));
    rng.sample(StandardNormal)
}

/// Delayed response time for a sample whose clean time is `t`.
///
/// The normal draw is made before `t` is used, then `I = t + σ·u` and
/// `t' = t + |t - I| = t + σ·|u|`.
pub fn delay_time(x: &[f64], t: f64, cfg: &TimeGuardConfig, timing: &TimingModel) -> f64 {
    match cfg.mode {
        DefenseMode::MaxDelay => timing.final_time(),
        DefenseMode::GaussianDelay => {
            let u = keyed_normal(x, &cfg.secret);
            let i = t + cfg.sigma * u;
            t + (t - i).abs()
        }
    }
}

pub fn timeguard_delay(
    x: &[f64],
    model: &MultiExitModel,
    timing: &TimingModel,
    cfg: &TimeGuardConfig,
) -> Result<DelayedPrediction> {
    let p = model.predict_early(x)?;
    let t = timing.clean_time(p.exit);
    Ok(DelayedPrediction { delay_time: delay_time(x, t, cfg, timing), probs: p.probs, label: p.label })
}

/// Every response waits for the final exit's clean time.
pub fn max_delay(x: &[f64], model: &MultiExitModel, timing: &TimingModel) -> Result<DelayedPrediction> {
    let p = model.predict_early(x)?;
    Ok(DelayedPrediction { delay_time: timing.final_time(), probs: p.probs, label: p.label })
}

/// Defended predictions for every row, with the true exits.
pub fn delayed_batch(
    x: ArrayView2<f64>,
    model: &MultiExitModel,
    timing: &TimingModel,
    cfg: &TimeGuardConfig,
) -> Result<(Vec<DelayedPrediction>, Vec<usize>)> {
    let preds = model.predict_early_batch(x)?;
    let mut out = Vec::with_capacity(preds.len());
    let mut exits = Vec::with_capacity(preds.len());
    for (row, p) in x.rows().into_iter().zip(preds) {
        let xs = row.to_vec();
        let t = timing.clean_time(p.exit);
        exits.push(p.exit);
        out.push(DelayedPrediction { delay_time: delay_time(&xs, t, cfg, timing), probs: p.probs, label: p.label });
    }
    Ok((out, exits))
}

/// Averaged observed time of defended responses: the delay is fixed per
/// sample, only the channel noise is averaged.
pub fn observe_defended<R: Rng + ?Sized>(
    delayed: &[DelayedPrediction],
    true_exits: &[usize],
    timing: &TimingModel,
    n_queries: usize,
    rng: &mut R,
) -> Result<TimingTrace> {
    if n_queries == 0 {
        return Err(Error::Config("n_queries must be at least 1".into()));
    }
    let records = delayed
        .iter()
        .zip(true_exits)
        .enumerate()
        .map(|(i, (d, &e))| {
            let noise: f64 = (0..n_queries).map(|_| timing.sample_noise(rng)).sum::<f64>() / n_queries as f64;
            TimingRecord { sample_id: i, mean_time_ms: d.delay_time + noise, n_queries, true_exit: e, predicted_exit: None }
        })
        .collect();
    Ok(TimingTrace { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub sigma: f64,
    pub hybrid_asr: f64,
    pub original_asr: f64,
    /// Mean defended response time, channel noise excluded.
    pub mean_response_ms: f64,
    pub predicted_n_exits: usize,
    pub exit_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
    /// Smallest σ whose hybrid ASR is within `epsilon` of the original ASR.
    pub crossing_sigma: Option<f64>,
    /// Response time under the max-delay defense.
    pub max_delay_ms: f64,
    pub epsilon: f64,
}

impl TradeoffTable {
    pub fn crossing_row(&self) -> Option<&TradeoffRow> {
        self.crossing_sigma.and_then(|s| self.rows.iter().find(|r| r.sigma == s))
    }
}

/// What the sweep attacks: a hybrid attack model trained on shadow records
/// with exits, the ASR of the exit-free attack (unaffected by delays), and the
/// balanced target evaluation sets.
pub struct AttackSuite<'a> {
    pub hybrid: &'a AttackModel,
    pub original_asr: f64,
    pub members: &'a TabularDataset,
    pub nonmembers: &'a TabularDataset,
    pub timing: &'a TimingModel,
    pub n_queries: usize,
    pub seed: u64,
}

/// For each σ: delay every evaluation sample, steal exits from the observed
/// times, rerun the hybrid attack with those exits and record the mean
/// response time.
pub fn tradeoff_sweep(
    model: &MultiExitModel,
    suite: &AttackSuite<'_>,
    sigmas: &[f64],
    secret: &SecretSeed,
) -> Result<TradeoffTable> {
    if sigmas.is_empty() {
        return Err(Error::Empty("sigma list"));
    }
    let n = suite.members.len().min(suite.nonmembers.len());
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let x = concatenate(Axis(0), &[suite.members.features.slice(s![..n, ..]), suite.nonmembers.features.slice(s![..n, ..])])
        .expect("same width");
    if !suite.hybrid.uses_exit {
        return Err(Error::Config("the sweep needs an attack model trained with exit information".into()));
    }
    let width = *suite.hybrid.component_dims.last().expect("exit component");
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let cfg = TimeGuardConfig::new(sigma, DefenseMode::GaussianDelay, secret.clone())?;
        let (delayed, exits) = delayed_batch(x.view(), model, suite.timing, &cfg)?;
        let mut rng = crate::seed::child_rng(suite.seed, &format!("sweep-channel-{sigma}"));
        let trace = observe_defended(&delayed, &exits, suite.timing, suite.n_queries, &mut rng)?;
        // no cluster cap: a defended channel is allowed to look like noise
        let steal = steal_from_trace(trace, model.n_exits(), usize::MAX)?;
        let observed = steal.predicted_exits();
        let source = ExitSource::Observed {
            member: observed[..n].to_vec(),
            nonmember: observed[n..].to_vec(),
            n_exits: width,
        };
        let ds = build_attack_dataset(model, suite.members, suite.nonmembers, &source, RecordOptions::default())?;
        rows.push(TradeoffRow {
            sigma,
            hybrid_asr: suite.hybrid.asr(&ds)?,
            original_asr: suite.original_asr,
            mean_response_ms: delayed.iter().map(|d| d.delay_time).sum::<f64>() / delayed.len() as f64,
            predicted_n_exits: steal.predicted_n_exits,
            exit_accuracy: steal.accuracy,
        });
    }
    let crossing_sigma = rows.iter().find(|r| r.hybrid_asr <= r.original_asr + CROSSING_EPSILON).map(|r| r.sigma);
    Ok(TradeoffTable { rows, crossing_sigma, max_delay_ms: suite.timing.final_time(), epsilon: CROSSING_EPSILON })
}
