//! Tabular classification data: synthetic prototype-flip tasks, CSV I/O and
//! the four-way target/shadow split.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub name: String,
    /// `n × d`
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl TabularDataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Config(format!("{} rows but {} labels", features.nrows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("features must be finite".into()));
        }
        Ok(TabularDataset { name: name.into(), features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn subset(&self, idx: &[usize]) -> TabularDataset {
        TabularDataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_class: usize,
    /// Probability that each prototype bit is flipped in a sample.
    pub flip_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// 100 classes over 600 binary features.
    pub fn purchases(seed: u64) -> Self {
        SynthConfig { name: "purchases".into(), n_classes: 100, n_features: 600, samples_per_class: 80, flip_prob: 0.3, seed }
    }

    /// 30 classes over 446 binary features.
    pub fn locations(seed: u64) -> Self {
        SynthConfig { name: "locations".into(), n_classes: 30, n_features: 446, samples_per_class: 120, flip_prob: 0.3, seed }
    }

    /// 100 classes over 1000 binary features.
    pub fn texas(seed: u64) -> Self {
        SynthConfig { name: "texas".into(), n_classes: 100, n_features: 1000, samples_per_class: 80, flip_prob: 0.35, seed }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "purchases" => Some(Self::purchases(seed)),
            "locations" => Some(Self::locations(seed)),
            "texas" => Some(Self::texas(seed)),
            _ => None,
        }
    }

    /// Early-exit threshold customary for the preset task.
    pub fn preset_tau(name: &str) -> Option<f64> {
        match name {
            "purchases" | "texas" => Some(0.7),
            "locations" => Some(0.5),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_features == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(format!("degenerate synthetic task {self:?}")));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must be in [0, 0.5), got {}", self.flip_prob)));
        }
        Ok(())
    }
}

/// Random binary class prototypes, one row per class.
pub fn prototypes(cfg: &SynthConfig) -> Array2<f64> {
    let mut rng = rng_from(derive_seed(cfg.seed, "prototypes"));
    Array2::from_shape_fn((cfg.n_classes, cfg.n_features), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
}

/// Samples are their class prototype with every bit independently flipped
/// with probability `flip_prob`. Rows are grouped by class.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TabularDataset> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let mut rng = rng_from(derive_seed(cfg.seed, "samples"));
    let n = cfg.n_classes * cfg.samples_per_class;
    let mut features = Array2::zeros((n, cfg.n_features));
    let mut labels = Vec::with_capacity(n);
    for (r, mut row) in features.rows_mut().into_iter().enumerate() {
        let class = r / cfg.samples_per_class;
        for (v, &p) in row.iter_mut().zip(protos.row(class)) {
            *v = if rng.gen::<f64>() < cfg.flip_prob { 1.0 - p } else { p };
        }
        labels.push(class);
    }
    TabularDataset::new(cfg.name.clone(), features, labels, cfg.n_classes)
}

/// Same shape as `cfg`, but fresh prototypes drawn from `shift_seed` and a
/// flip probability raised by 0.05.
pub fn shifted_variant(cfg: &SynthConfig, shift_seed: u64) -> Result<TabularDataset> {
    let shifted = SynthConfig {
        name: format!("{}-shifted", cfg.name),
        seed: derive_seed(shift_seed, "shifted-variant"),
        flip_prob: (cfg.flip_prob + 0.05).min(0.49),
        ..cfg.clone()
    };
    synth_generate(&shifted)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourWaySplit {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
}

impl FourWaySplit {
    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.target_train, &self.target_test, &self.shadow_train, &self.shadow_test]
    }
}

/// Uniformly random partition into four disjoint parts whose sizes differ
/// by at most one.
pub fn split_four(n: usize, seed: u64) -> Result<FourWaySplit> {
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let mut parts: Vec<Vec<usize>> = (0..4)
        .map(|k| {
            let lo = k * n / 4;
            let hi = (k + 1) * n / 4;
            let mut p = idx[lo..hi].to_vec();
            p.sort_unstable();
            p
        })
        .collect();
    let shadow_test = parts.pop().expect("four parts");
    let shadow_train = parts.pop().expect("four parts");
    let target_test = parts.pop().expect("four parts");
    let target_train = parts.pop().expect("four parts");
    Ok(FourWaySplit { target_train, target_test, shadow_train, shadow_test })
}

/// Reads a CSV with a header row. Every column except `label_column` is a
/// numeric feature; the label column holds non-negative integers and the
/// class count is `max(label) + 1`.
pub fn load_csv(path: &Path, label_column: &str) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column `{label_column}` not in header")))?;
    let n_cols = headers.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::MissingValue { row: line, column: headers[c].to_string() });
            }
            if c == label_idx {
                let y: usize = cell.parse().map_err(|_| Error::CsvParse {
                    line,
                    message: format!("label `{cell}` is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                    line,
                    message: format!("column `{}`: `{cell}` is not a number", &headers[c]),
                })?;
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv has no data rows"));
    }
    let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    let features = Array2::from_shape_vec((labels.len(), n_cols - 1), values).expect("rectangular by construction");
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    TabularDataset::new(name, features, labels, n_classes)
}

/// Writes features as `f0..f{d-1}` followed by the label column.
pub fn write_csv(ds: &TabularDataset, path: &Path, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.n_features()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sizes and pairwise disjointness of a split.
pub fn check_split(split: &FourWaySplit, n: usize) -> bool {
    let mut seen = BTreeSet::new();
    let parts = split.parts();
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
    for p in parts {
        for &i in p {
            if i >= n || !seen.insert(i) {
                return false;
            }
        }
    }
    hi - lo <= 1 && seen.len() == n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(flip: f64, seed: u64) -> SynthConfig {
        SynthConfig { name: "t".into(), n_classes: 5, n_features: 40, samples_per_class: 8, flip_prob: flip, seed }
    }

    #[test]
    fn zero_flip_reproduces_prototypes() {
        let cfg = small(0.0, 1);
        let ds = synth_generate(&cfg).unwrap();
        let p = prototypes(&cfg);
        for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
            assert_eq!(row, p.row(y));
        }
    }

    #[test]
    fn purchases_shape() {
        let ds = synth_generate(&SynthConfig::purchases(0)).unwrap();
        assert_eq!(ds.features.dim(), (8000, 600));
        assert_eq!(ds.n_classes, 100);
        assert!(ds.class_counts().iter().all(|&c| c == 80));
    }

    #[test]
    fn generation_is_pure() {
        let cfg = small(0.2, 9);
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    }

    #[test]
    fn flip_probability_must_stay_below_half() {
        assert!(synth_generate(&small(0.5, 1)).is_err());
    }

    #[test]
    fn split_sizes_and_errors() {
        let s = split_four(8000, 3).unwrap();
        assert!(s.parts().iter().all(|p| p.len() == 2000));
        assert!(check_split(&s, 8000));
        let s = split_four(10, 3).unwrap();
        assert!(check_split(&s, 10));
        assert!(matches!(split_four(3, 0), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn seeds_change_the_partition() {
        assert_ne!(split_four(100, 1).unwrap(), split_four(100, 2).unwrap());
        assert_eq!(split_four(100, 1).unwrap(), split_four(100, 1).unwrap());
    }
}
