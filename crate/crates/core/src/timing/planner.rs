use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Queries per sample needed to tell two adjacent exits apart with a
/// two-sided Z-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub delta_t: f64,
    pub sigma: f64,
    pub z_star: f64,
    pub n_required: u64,
}

/// Two-sided critical value for `confidence`, rounded to two decimals as in
/// standard tables (0.95 → 1.96).
pub fn z_critical(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence must be in (0, 1), got {confidence}")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    Ok((z * 100.0).round() / 100.0)
}

/// With equal query counts `N` per sample the Z statistic of two averaged
/// latencies is `Δt / (σ·sqrt(2/N))`; requiring `|Z| ≥ z*` gives
/// `N ≥ 2·(z*·σ/Δt)²`.
pub fn plan_queries(delta_t: f64, sigma: f64, confidence: f64) -> Result<QueryPlan> {
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(Error::NonPositiveGap(delta_t));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    let z_star = z_critical(confidence)?;
    let ratio = z_star * sigma / delta_t;
    let n = (2.0 * ratio * ratio).ceil().max(1.0) as u64;
    Ok(QueryPlan { delta_t, sigma, z_star, n_required: n })
}
