use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Fully connected layer computing `x · Wᵀ + b` on row-major batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out_dim × in_dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    /// Weights uniform in ±sqrt(6 / (in + out)), bias zero.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        assert!(in_dim >= 1 && out_dim >= 1, "dense layer dimensions must be positive");
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        DenseLayer { weights, bias: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        y
    }

    /// Returns the gradient w.r.t. the input and the parameter gradients.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Array2<f64>, DenseGrad) {
        let weights = grad_out.t().dot(&x).as_standard_layout().into_owned();
        let bias = grad_out.sum_axis(Axis(0));
        let grad_in = grad_out.dot(&self.weights);
        (grad_in, DenseGrad { weights, bias })
    }

    /// Multiplies and adds counted separately, plus one addition per bias.
    pub fn ops(&self) -> u64 {
        let (o, i) = (self.out_dim() as u64, self.in_dim() as u64);
        2 * i * o + o
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization over the feature axis of a `batch × dim` input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// Batch statistics, present only for train-mode passes.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Clone, Debug)]
pub struct NormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub const NORM_EPSILON: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

impl NormLayer {
    pub fn new(dim: usize) -> Self {
        NormLayer {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            epsilon: NORM_EPSILON,
            momentum: NORM_MOMENTUM,
            mode: NormMode::Eval,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Pure forward pass. In train mode the batch statistics are returned in
    /// the cache instead of being folded into the running estimates.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let (mean, var, batch_stats) = match self.mode {
            NormMode::Train => {
                let n = x.nrows() as f64;
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &x - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            NormMode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std, batch_stats })
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>, batch: usize) {
        let m = self.momentum;
        let correction = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
        Zip::from(&mut self.running_mean).and(mean).for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        Zip::from(&mut self.running_var)
            .and(var)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * correction);
    }

    pub fn backward(&self, cache: &NormCache, grad_out: ArrayView2<f64>) -> (Array2<f64>, NormGrad) {
        let gamma_grad = (&grad_out * &cache.xhat).sum_axis(Axis(0));
        let beta_grad = grad_out.sum_axis(Axis(0));
        let dxhat = &grad_out * &self.gamma;
        let grad_in = match cache.batch_stats {
            Some(_) => {
                let n = grad_out.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let mut g = dxhat * n - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
                g *= &(&cache.inv_std / n);
                g
            }
            None => dxhat * &cache.inv_std,
        };
        (grad_in, NormGrad { gamma: gamma_grad, beta: beta_grad })
    }

    pub fn ops(&self) -> u64 {
        4 * self.dim() as u64
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes the gradient where the pre-activation was not positive.
pub fn relu_backward(pre: &Array2<f64>, grad_out: &mut Array2<f64>) {
    Zip::from(grad_out).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Per-row cross-entropy `logsumexp(z) - z_y`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (lse - row[y]).max(0.0)
        })
        .collect()
}
