use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MultiExitModel;

/// Simulated inference latency: a clean time per exit derived from the
/// operation counts, plus positive channel noise per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub base_time_ms: f64,
    pub time_per_op_ms: f64,
    pub clean_times: Vec<f64>,
    pub noise_mu: f64,
    pub noise_sigma: f64,
}

pub const DEFAULT_BASE_MS: f64 = 1.0;
pub const DEFAULT_MS_PER_OP: f64 = 1e-3;

impl TimingModel {
    pub fn new(ops_per_exit: &[u64], base_time_ms: f64, time_per_op_ms: f64, noise_mu: f64, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidSigma(noise_sigma));
        }
        if ops_per_exit.is_empty() {
            return Err(Error::Empty("ops table"));
        }
        if !(time_per_op_ms > 0.0) || !base_time_ms.is_finite() || !noise_mu.is_finite() {
            return Err(Error::Config("timing parameters must be finite with a positive time per op".into()));
        }
        let clean_times: Vec<f64> = ops_per_exit.iter().map(|&o| base_time_ms + time_per_op_ms * o as f64).collect();
        if clean_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("clean exit times must be strictly increasing".into()));
        }
        Ok(TimingModel { base_time_ms, time_per_op_ms, clean_times, noise_mu, noise_sigma })
    }

    /// Timing model of `model` with the default time scale.
    pub fn for_model(model: &MultiExitModel, noise_mu: f64, noise_sigma: f64) -> Result<Self> {
        Self::new(&model.ops_per_exit, DEFAULT_BASE_MS, DEFAULT_MS_PER_OP, noise_mu, noise_sigma)
    }

    pub fn clean_time(&self, exit: usize) -> f64 {
        self.clean_times[exit]
    }

    pub fn final_time(&self) -> f64 {
        *self.clean_times.last().expect("non-empty")
    }

    /// Smallest gap between adjacent clean exit times.
    pub fn min_gap(&self) -> Option<f64> {
        self.clean_times.windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        truncated_positive_normal(self.noise_mu, self.noise_sigma, rng)
    }

    /// Mean of `n_queries` noisy observations of the clean time of `exit`.
    pub fn measure_exit<R: Rng + ?Sized>(&self, exit: usize, n_queries: usize, rng: &mut R) -> Result<f64> {
        if n_queries == 0 {
            return Err(Error::Config("n_queries must be at least 1".into()));
        }
        let t = self.clean_times[exit];
        let total: f64 = (0..n_queries).map(|_| t + self.sample_noise(rng)).sum();
        Ok(total / n_queries as f64)
    }
}

/// Draw from N(mu, sigma²) conditioned on being positive.
///
/// With `sigma == 0` the draw is `max(mu, 0)`. When the acceptance region is
/// far in the tail the exponential-proposal sampler of Robert (1995) replaces
/// plain rejection.
pub fn truncated_positive_normal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return mu.max(0.0);
    }
    let lower = -mu / sigma;
    if lower < 3.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > lower {
                return mu + sigma * z;
            }
        }
    }
    let lambda = (lower + (lower * lower + 4.0).sqrt()) / 2.0;
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let z = lower + exp.sample(rng);
        let accept = (-(z - lambda) * (z - lambda) / 2.0).exp();
        if rng.gen::<f64>() <= accept {
            return mu + sigma * z;
        }
    }
}

/// Averaged noisy latency of one early-exit query of `x`.
pub fn measure<R: Rng + ?Sized>(
    timing: &TimingModel,
    model: &MultiExitModel,
    x: &[f64],
    n_queries: usize,
    rng: &mut R,
) -> Result<f64> {
    let exit = model.predict_early(x)?.exit;
    timing.measure_exit(exit, n_queries, rng)
}

/// Sample standard deviation of `n_probe` single-query latencies of `x`.
pub fn estimate_sigma<R: Rng + ?Sized>(
    timing: &TimingModel,
    model: &MultiExitModel,
    x: &[f64],
    n_probe: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_probe < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_probe });
    }
    let exit = model.predict_early(x)?.exit;
    let times: Vec<f64> = (0..n_probe).map(|_| timing.clean_time(exit) + timing.sample_noise(rng)).collect();
    Ok(sample_sd(&times))
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    if v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn truncated_noise_is_positive() {
        let mut rng = rng_from(1);
        for (mu, sigma) in [(0.0, 1.0), (-5.0, 1.0), (-50.0, 2.0), (3.0, 0.5)] {
            for _ in 0..2000 {
                assert!(truncated_positive_normal(mu, sigma, &mut rng) > 0.0);
            }
        }
        assert_eq!(truncated_positive_normal(2.0, 0.0, &mut rng), 2.0);
        assert_eq!(truncated_positive_normal(-2.0, 0.0, &mut rng), 0.0);
    }

    #[test]
    fn tail_sampler_matches_exponential_limit() {
        // far tail of N(0,1) beyond a: mean excess ≈ 1/a
        let mut rng = rng_from(2);
        let n = 20000;
        let m: f64 = (0..n).map(|_| truncated_positive_normal(-8.0, 1.0, &mut rng)).sum::<f64>() / n as f64;
        let exact = 1.0 / 8.0 - 1.0 / 8f64.powi(3);
        assert!((m - exact).abs() < 0.01, "{m} vs {exact}");
    }

    #[test]
    fn clean_times_must_increase() {
        assert!(TimingModel::new(&[10, 10], 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(TimingModel::new(&[10, 20], 1.0, 1.0, 0.0, -1.0).is_err());
        let t = TimingModel::new(&[10, 20, 40], 1.0, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(t.clean_times, vec![6.0, 11.0, 21.0]);
        assert_eq!(t.min_gap(), Some(5.0));
    }
}
