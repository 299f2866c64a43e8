use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::NormMode;
use super::model::MultiExitModel;
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 64, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam moments must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient slot mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (slot, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean joint loss over each epoch's batches.
    pub epoch_loss: Vec<f64>,
}

/// Minimizes the summed cross-entropy over all exits with minibatch Adam.
///
/// Norm layers use batch statistics during training and fold them into the
/// running estimates; the model is left in eval mode. Batches of a single
/// row are skipped since batch statistics are undefined for them.
pub fn train_joint(
    model: &mut MultiExitModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Config(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(Error::Config(format!("label {bad} out of range for {} classes", model.n_classes())));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::InputShape { expected: model.input_dim(), got: x.ncols() });
    }

    let mut rng = rng_from(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut log = TrainLog::default();
    model.set_mode(NormMode::Train);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = model.trace(xb.view())?;
            let (loss, grads) = model.backward(&trace, &yb);
            if !loss.is_finite() {
                model.set_mode(NormMode::Eval);
                return Err(Error::TrainingDiverged { epoch });
            }
            let stats: Vec<_> = trace.norm_stats().map(|s| s.cloned()).collect();
            drop(trace);
            adam.step(model.param_slices_mut(), grads.slices());
            for (block, s) in model.blocks.iter_mut().zip(stats) {
                if let Some((mean, var)) = s {
                    block.norm.update_running(&mean, &var, chunk.len());
                }
            }
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        if !mean.is_finite() || !model.is_finite() {
            model.set_mode(NormMode::Eval);
            return Err(Error::TrainingDiverged { epoch });
        }
        log.epoch_loss.push(mean);
    }
    model.set_mode(NormMode::Eval);
    Ok(log)
}
