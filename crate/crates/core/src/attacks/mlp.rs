use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, relu, relu_backward, softmax, Adam, DenseLayer, TrainConfig};
use crate::seed::rng_from;

/// Dense layers with rectifiers between them and raw logits out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

pub(crate) struct MlpCache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        Mlp { layers: dims.windows(2).map(|w| DenseLayer::new(w[0], w[1], rng)).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            if i + 1 == self.layers.len() {
                return (z, MlpCache { inputs, pre });
            }
            h = relu(&z);
            pre.push(z);
        }
        unreachable!()
    }

    /// Gradient w.r.t. the input, plus parameter gradients in slot order.
    pub(crate) fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>) -> (Array2<f64>, Vec<Vec<f64>>) {
        let mut grads = vec![Vec::new(); 2 * self.layers.len()];
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let (gin, dg) = self.layers[i].backward(cache.inputs[i].view(), g.view());
            grads[2 * i] = dg.weights.into_raw_vec_and_offset().0;
            grads[2 * i + 1] = dg.bias.to_vec();
            g = gin;
            if i > 0 {
                relu_backward(&cache.pre[i - 1], &mut g);
            }
        }
        (g, grads)
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

/// Column means and standard deviations, with constant columns left unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let sd = x.std_axis(Axis(0), 0.0);
        Standardizer { mean: mean.to_vec(), scale: sd.iter().map(|&s| if s > 1e-9 { s } else { 1.0 }).collect() }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Minibatch Adam on softmax cross-entropy for a plain classifier.
pub fn train_classifier(mlp: &mut Mlp, x: ArrayView2<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    let mut rng = rng_from(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = mlp.forward_cached(xb.view());
            let losses = cross_entropy(&logits, &yb);
            let loss = losses.iter().sum::<f64>() / yb.len() as f64;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * yb.len() as f64;
            let g = ce_grad(&logits, &yb);
            let (_, grads) = mlp.backward(&cache, g);
            let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(mlp.param_slices_mut(), grads);
        }
        log.push(total / labels.len() as f64);
    }
    Ok(log)
}

/// Gradient of the batch-mean cross-entropy w.r.t. the logits.
pub(crate) fn ce_grad(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut g = softmax(logits);
    let n = labels.len() as f64;
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
        row /= n;
    }
    g
}

pub(crate) fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b }))
        .collect()
}
