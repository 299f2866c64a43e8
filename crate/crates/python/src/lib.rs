use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use exitaudit::data::{synth_generate, SynthConfig, TabularDataset};
use exitaudit::defense::{self, DefenseMode, SecretSeed, TimeGuardConfig};
use exitaudit::nn::{self, Architecture, MultiExitModel, TrainConfig};
use exitaudit::pipeline::train_model;
use exitaudit::timing::{self, TimingModel};

fn err(e: exitaudit::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Labelled tabular data held in Rust.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: TabularDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, n_classes, name = "data".to_string()))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize, name: String) -> PyResult<Self> {
        let inner = TabularDataset::new(name, to_array(features)?, labels, n_classes).map_err(err)?;
        Ok(PyDataset { inner })
    }

    /// Synthetic dataset from a named preset (`purchases`, `locations`, `texas`).
    #[staticmethod]
    #[pyo3(signature = (preset, seed = 0))]
    fn preset(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig::preset(preset, seed)
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset {preset:?}")))?;
        Ok(PyDataset { inner: synth_generate(&cfg).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n_classes, n_features, samples_per_class, flip_prob, seed = 0))]
    fn synthetic(n_classes: usize, n_features: usize, samples_per_class: usize, flip_prob: f64, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig { name: "synthetic".into(), n_classes, n_features, samples_per_class, flip_prob, seed };
        Ok(PyDataset { inner: synth_generate(&cfg).map_err(err)? })
    }

    fn subset(&self, idx: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(PyDataset { inner: self.inner.subset(&idx) })
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, features={}, classes={})", self.inner.len(), self.inner.n_features(), self.inner.n_classes)
    }
}

/// Multi-exit classifier.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: MultiExitModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (data, n_exits, tau, width = 64, head_hidden = 16, n_blocks = 5, epochs = 15, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data: &PyDataset,
        n_exits: usize,
        tau: f64,
        width: usize,
        head_hidden: usize,
        n_blocks: usize,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let d = &data.inner;
        let mut arch = Architecture::new(d.n_features(), d.n_classes, width, n_blocks, n_exits);
        arch.head_hidden = head_hidden;
        let cfg = TrainConfig { epochs, ..Default::default() };
        let (inner, _) = train_model(arch, tau, d, &cfg, seed, "model").map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyModel { inner: nn::model_from_str(s).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        nn::model_to_string(&self.inner).map_err(err)
    }

    /// `(label, exit, probs)` for one sample under early exiting.
    fn predict(&self, x: Vec<f64>) -> PyResult<(usize, usize, Vec<f64>)> {
        let p = self.inner.predict_early(&x).map_err(err)?;
        Ok((p.label, p.exit, p.probs))
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        self.inner.early_exit_accuracy(data.inner.view(), &data.inner.labels).map_err(err)
    }

    fn exits_taken(&self, data: &PyDataset) -> PyResult<Vec<usize>> {
        let p = self.inner.predict_early_batch(data.inner.view()).map_err(err)?;
        Ok(p.into_iter().map(|p| p.exit).collect())
    }

    #[getter]
    fn n_exits(&self) -> usize {
        self.inner.n_exits()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn ops_per_exit(&self) -> Vec<u64> {
        self.inner.ops_per_exit.clone()
    }

    fn __repr__(&self) -> String {
        format!("Model(exits={}, tau={})", self.inner.n_exits(), self.inner.tau)
    }
}

/// KDE clustering of response times: `(minima, clusters, bandwidth)`.
#[pyfunction]
fn kde_cluster(times: Vec<f64>) -> PyResult<(Vec<f64>, Vec<usize>, f64)> {
    let k = timing::kde_cluster(&times).map_err(err)?;
    Ok((k.minima, k.clusters, k.bandwidth))
}

/// Queries per sample needed to separate two exits `delta_t` apart.
#[pyfunction]
#[pyo3(signature = (delta_t, sigma, confidence = 0.95))]
fn plan_queries(delta_t: f64, sigma: f64, confidence: f64) -> PyResult<u64> {
    Ok(timing::plan_queries(delta_t, sigma, confidence).map_err(err)?.n_required)
}

#[pyfunction]
#[pyo3(signature = (p, q, n_bins = exitaudit::analysis::DEFAULT_BINS, epsilon = exitaudit::analysis::DEFAULT_EPSILON))]
fn js_divergence(p: Vec<f64>, q: Vec<f64>, n_bins: usize, epsilon: f64) -> PyResult<f64> {
    exitaudit::analysis::js_divergence(&p, &q, n_bins, epsilon).map_err(err)
}

/// Noisy timing side channel: `(predicted_n_exits, accuracy)`.
#[pyfunction]
#[pyo3(signature = (model, data, n_queries = 1, noise_sigma = 0.0, seed = 0))]
fn steal_exits(model: &PyModel, data: &PyDataset, n_queries: usize, noise_sigma: f64, seed: u64) -> PyResult<(usize, f64)> {
    let t = TimingModel::for_model(&model.inner, 0.0, noise_sigma).map_err(err)?;
    let mut rng = exitaudit::seed::rng_from(seed);
    let r = timing::steal_exit_depths(&t, &model.inner, data.inner.view(), n_queries, &mut rng).map_err(err)?;
    Ok((r.predicted_n_exits, r.accuracy))
}

/// Defended response time for `x`. `secret` is 64 hex characters.
#[pyfunction]
#[pyo3(signature = (model, x, sigma, secret, max_delay = false))]
fn timeguard_delay(model: &PyModel, x: Vec<f64>, sigma: f64, secret: &str, max_delay: bool) -> PyResult<f64> {
    let mode = if max_delay { DefenseMode::MaxDelay } else { DefenseMode::GaussianDelay };
    let cfg = TimeGuardConfig::new(sigma, mode, SecretSeed::from_hex(secret).map_err(err)?).map_err(err)?;
    let t = TimingModel::for_model(&model.inner, 0.0, 0.0).map_err(err)?;
    Ok(defense::timeguard_delay(&x, &model.inner, &t, &cfg).map_err(err)?.delay_time)
}

#[pymodule]
#[pyo3(name = "exitaudit")]
fn exitaudit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kde_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(plan_queries, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(steal_exits, m)?)?;
    m.add_function(wrap_pyfunction!(timeguard_delay, m)?)?;
    Ok(())
}
