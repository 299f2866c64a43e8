use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackTrainConfig;
use crate::data::SynthConfig;
use crate::defense::{DefenseMode, DEFAULT_SECRET_ENV};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;

/// One experiment. Every section has defaults, so an empty file is a valid
/// Purchases-like run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every randomized step derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// The per-model seeds are derived from `seed`; `training.seed` is ignored.
    pub training: TrainConfig,
    pub attack: AttackConfig,
    pub adversary: AdversarySection,
    pub defense: DefenseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig { epochs: 15, ..Default::default() },
            attack: AttackConfig::default(),
            adversary: AdversarySection::default(),
            defense: DefenseSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Synthetic fields left unset take the preset's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// `purchases`, `locations` or `texas`.
    pub preset: String,
    pub n_classes: Option<usize>,
    pub n_features: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub flip_prob: Option<f64>,
    /// CSV input, relative to the working directory.
    pub path: Option<PathBuf>,
    pub label_column: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synthetic,
            preset: "purchases".into(),
            n_classes: None,
            n_features: None,
            samples_per_class: None,
            flip_prob: None,
            path: None,
            label_column: "label".into(),
        }
    }
}

impl DatasetConfig {
    pub fn synth(&self, seed: u64) -> Result<SynthConfig> {
        let mut c = SynthConfig::preset(&self.preset, seed)
            .ok_or_else(|| Error::Config(format!("dataset.preset: unknown preset `{}`", self.preset)))?;
        if let Some(v) = self.n_classes {
            c.n_classes = v;
        }
        if let Some(v) = self.n_features {
            c.n_features = v;
        }
        if let Some(v) = self.samples_per_class {
            c.samples_per_class = v;
        }
        if let Some(v) = self.flip_prob {
            c.flip_prob = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Early-exit threshold: a number, `"auto"` (smallest threshold keeping the
/// vanilla accuracy) or `"preset"` (the task's customary value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSetting {
    Fixed(f64),
    Auto,
    Preset,
}

impl Serialize for TauSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TauSetting::Fixed(v) => s.serialize_f64(*v),
            TauSetting::Auto => s.serialize_str("auto"),
            TauSetting::Preset => s.serialize_str("preset"),
        }
    }
}

impl<'de> Deserialize<'de> for TauSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(TauSetting::Fixed(v)),
            Raw::Int(v) => Ok(TauSetting::Fixed(v as f64)),
            Raw::Word(w) if w == "auto" => Ok(TauSetting::Auto),
            Raw::Word(w) if w == "preset" => Ok(TauSetting::Preset),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a number, \"auto\" or \"preset\", got \"{w}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub head_hidden: usize,
    pub n_blocks: usize,
    /// Total exits including the final classifier; 1 is the vanilla backbone.
    pub n_exits: usize,
    pub tau: TauSetting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { width: 64, head_hidden: 16, n_blocks: 5, n_exits: 4, tau: TauSetting::Preset }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub encoder_width: usize,
    pub head_widths: [usize; 3],
    /// Members and non-members each for the label-only attack.
    pub label_only_samples: usize,
    pub perturb_directions: usize,
    pub bisection_steps: usize,
    /// The gradient attack dominates the audit's runtime.
    pub gradient: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            encoder_width: 64,
            head_widths: [256, 128, 64],
            label_only_samples: 300,
            perturb_directions: 10,
            bisection_steps: 20,
            gradient: true,
        }
    }
}

impl AttackConfig {
    pub fn train_config(&self, seed: u64) -> AttackTrainConfig {
        AttackTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            encoder_width: self.encoder_width,
            head_widths: self.head_widths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    /// Backbone width of the mismatched shadow; `None` halves the target's.
    pub shadow_width: Option<usize>,
    /// Train the distribution-shifted shadow (synthetic data only).
    pub shifted_shadow: bool,
    pub base_time_ms: f64,
    pub time_per_op_ms: f64,
    pub noise_mu: f64,
    pub noise_sigma: f64,
    /// Queries averaged per sample.
    pub n_queries: usize,
    /// Probes drawn from the shadow data for exit stealing.
    pub n_probes: usize,
    /// Single queries used to estimate the channel noise.
    pub sigma_probes: usize,
    pub confidence: f64,
}

impl Default for AdversarySection {
    fn default() -> Self {
        AdversarySection {
            shadow_width: None,
            shifted_shadow: true,
            base_time_ms: crate::timing::DEFAULT_BASE_MS,
            time_per_op_ms: crate::timing::DEFAULT_MS_PER_OP,
            noise_mu: 0.0,
            noise_sigma: 0.0,
            n_queries: 1,
            n_probes: 2000,
            sigma_probes: 50,
            confidence: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// When false, `defend` and `sweep` refuse to run.
    pub enabled: bool,
    pub sigma: f64,
    pub mode: DefenseMode,
    /// Environment variable holding the 64-hex-digit secret.
    pub secret_env: String,
    pub sweep_sigmas: Vec<f64>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            enabled: true,
            sigma: 10.0,
            mode: DefenseMode::GaussianDelay,
            secret_env: DEFAULT_SECRET_ENV.into(),
            sweep_sigmas: vec![0.0, 5.0, 10.0, 20.0, 40.0],
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` of the form
    /// `dotted.key=value`, then deserializes and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table = s.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self.dataset.source {
            DataSource::Synthetic => {
                self.dataset.synth(self.seed)?;
            }
            DataSource::Csv => match &self.dataset.path {
                None => return bad("dataset.path: required when dataset.source = \"csv\""),
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!("dataset.path: {} does not exist", p.display())))
                }
                _ => {}
            },
        }
        if let TauSetting::Fixed(t) = self.model.tau {
            if !(0.0..=1.0).contains(&t) {
                return bad("model.tau: must be in [0, 1]");
            }
        }
        if self.model.width == 0 || self.model.head_hidden == 0 || self.model.n_blocks == 0 {
            return bad("model: width, head_hidden and n_blocks must be positive");
        }
        if !(1..=crate::nn::MAX_EXITS).contains(&self.model.n_exits) || self.model.n_exits - 1 > self.model.n_blocks {
            return bad("model.n_exits: must be in [1, 6] and at most n_blocks + 1");
        }
        self.training.validate()?;
        if self.attack.epochs == 0 || self.attack.batch_size == 0 || self.attack.label_only_samples == 0 {
            return bad("attack: epochs, batch_size and label_only_samples must be positive");
        }
        if self.attack.perturb_directions == 0 || self.attack.bisection_steps == 0 {
            return bad("attack: perturb_directions and bisection_steps must be positive");
        }
        let a = &self.adversary;
        if a.shadow_width == Some(0) {
            return bad("adversary.shadow_width: must be positive");
        }
        if !(a.noise_sigma >= 0.0 && a.noise_sigma.is_finite()) {
            return bad("adversary.noise_sigma: must be non-negative");
        }
        if !(a.time_per_op_ms > 0.0) {
            return bad("adversary.time_per_op_ms: must be positive");
        }
        if a.n_queries == 0 || a.n_probes < 2 || a.sigma_probes < 2 {
            return bad("adversary: n_queries must be positive, n_probes and sigma_probes at least 2");
        }
        if !(a.confidence > 0.0 && a.confidence < 1.0) {
            return bad("adversary.confidence: must be in (0, 1)");
        }
        {
            let d = &self.defense;
            if !(d.sigma >= 0.0 && d.sigma.is_finite()) || d.sweep_sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return bad("defense: sigma values must be non-negative and finite");
            }
            if d.sweep_sigmas.is_empty() {
                return bad("defense.sweep_sigmas: must not be empty");
            }
        }
        Ok(())
    }

    /// Early-exit threshold named by the config, unless it is `auto`.
    pub fn fixed_tau(&self) -> Option<f64> {
        match self.model.tau {
            TauSetting::Fixed(t) => Some(t),
            TauSetting::Auto => None,
            TauSetting::Preset => Some(SynthConfig::preset_tau(&self.dataset.preset).unwrap_or(0.7)),
        }
    }
}

/// Sets `dotted.key` in `table`. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
