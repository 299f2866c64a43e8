//! In-memory experiment steps shared by the commands and the acceptance grid.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    build_attack_dataset, label_only_inputs, run_label_only_attack, train_attack_model, AttackMode, AttackModel,
    AttackTrainConfig, ExitSource, LabelOnlyInputs, PerturbConfig, RecordOptions,
};
use crate::data::{FourWaySplit, TabularDataset};
use crate::error::Result;
use crate::nn::{train_joint, Architecture, MultiExitModel, TrainConfig, TrainLog};
use crate::seed::{derive_seed, rng_from};

/// The four disjoint parts of one dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub target_train: TabularDataset,
    pub target_test: TabularDataset,
    pub shadow_train: TabularDataset,
    pub shadow_test: TabularDataset,
}

impl Splits {
    pub fn new(ds: &TabularDataset, split: &FourWaySplit) -> Self {
        Splits {
            target_train: ds.subset(&split.target_train),
            target_test: ds.subset(&split.target_test),
            shadow_train: ds.subset(&split.shadow_train),
            shadow_test: ds.subset(&split.shadow_test),
        }
    }

    /// First `n` rows of the pooled shadow data.
    pub fn shadow_probes(&self, n: usize) -> Array2<f64> {
        let pooled = concatenate(Axis(0), &[self.shadow_train.view(), self.shadow_test.view()]).expect("same width");
        pooled.slice(s![..n.min(pooled.nrows()), ..]).to_owned()
    }

    /// Balanced target evaluation rows: members then non-members.
    pub fn target_eval(&self) -> (Array2<f64>, usize) {
        let n = self.target_train.len().min(self.target_test.len());
        let x = concatenate(
            Axis(0),
            &[self.target_train.features.slice(s![..n, ..]), self.target_test.features.slice(s![..n, ..])],
        )
        .expect("same width");
        (x, n)
    }
}

/// Builds and trains one model with seeds derived from `master` and `label`.
pub fn train_model(
    arch: Architecture,
    tau: f64,
    data: &TabularDataset,
    train: &TrainConfig,
    master: u64,
    label: &str,
) -> Result<(MultiExitModel, TrainLog)> {
    let mut model = MultiExitModel::new(arch, tau, &mut rng_from(derive_seed(master, &format!("{label}-init"))))?;
    let cfg = TrainConfig { seed: derive_seed(master, &format!("{label}-train")), ..train.clone() };
    let log = train_joint(&mut model, data.view(), &data.labels, &cfg)?;
    Ok((model, log))
}

/// ASR of an attack without exit information and of its exit-aware hybrid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrPair {
    pub original: f64,
    pub hybrid: f64,
}

/// Trained score or gradient attack models, both variants.
pub struct TrainedAttack {
    pub mode: AttackMode,
    pub original: AttackModel,
    pub hybrid: AttackModel,
    /// Penultimate width of the shadow records; target records are conformed to it.
    pub penult_width: usize,
}

impl TrainedAttack {
    /// Trains both variants on the shadow model's records; the hybrid sees
    /// the exits the shadow itself took.
    pub fn fit(
        shadow: &MultiExitModel,
        shadow_members: &TabularDataset,
        shadow_nonmembers: &TabularDataset,
        mode: AttackMode,
        cfg: &AttackTrainConfig,
    ) -> Result<Self> {
        let opts = RecordOptions { gradients: mode == AttackMode::GradientBased, gradient_at_final: false };
        let sd = build_attack_dataset(shadow, shadow_members, shadow_nonmembers, &ExitSource::Direct, opts)?;
        Ok(TrainedAttack {
            mode,
            penult_width: sd.penult.ncols(),
            original: train_attack_model(&sd.without_exits(), mode, cfg)?,
            hybrid: train_attack_model(&sd, mode, cfg)?,
        })
    }

    /// Scores the target; `exits` is what the hybrid variant gets to see.
    pub fn evaluate(
        &self,
        target: &MultiExitModel,
        members: &TabularDataset,
        nonmembers: &TabularDataset,
        exits: &ExitSource,
    ) -> Result<AsrPair> {
        let opts = RecordOptions { gradients: self.mode == AttackMode::GradientBased, gradient_at_final: false };
        let td = build_attack_dataset(target, members, nonmembers, exits, opts)?.with_penult_width(self.penult_width);
        Ok(AsrPair { original: self.original.asr(&td.without_exits())?, hybrid: self.hybrid.asr(&td)? })
    }
}

impl TrainedAttack {
    /// ASR of the exit-free variant only, e.g. against a single-exit model.
    pub fn evaluate_original(
        &self,
        target: &MultiExitModel,
        members: &TabularDataset,
        nonmembers: &TabularDataset,
    ) -> Result<f64> {
        let opts = RecordOptions { gradients: self.mode == AttackMode::GradientBased, gradient_at_final: false };
        let td = build_attack_dataset(target, members, nonmembers, &ExitSource::None, opts)?
            .with_penult_width(self.penult_width);
        self.original.asr(&td)
    }
}

/// Label-only attack with a global threshold and with per-exit thresholds.
pub struct LabelOnlyRun {
    pub shadow: LabelOnlyInputs,
    pub target: LabelOnlyInputs,
    pub perturb: PerturbConfig,
    pub n_exits: usize,
}

impl LabelOnlyRun {
    /// Magnitudes for `n` members and `n` non-members on each side.
    #[allow(clippy::too_many_arguments)]
    pub fn measure(
        shadow: &MultiExitModel,
        shadow_members: &TabularDataset,
        shadow_nonmembers: &TabularDataset,
        target: &MultiExitModel,
        members: &TabularDataset,
        nonmembers: &TabularDataset,
        n: usize,
        perturb: PerturbConfig,
    ) -> Result<Self> {
        let s = label_only_inputs(shadow, shadow_members.view(), shadow_nonmembers.view(), n, &perturb)?;
        let t = label_only_inputs(target, members.view(), nonmembers.view(), n, &perturb)?;
        Ok(LabelOnlyRun { shadow: s, target: t, perturb, n_exits: target.n_exits().max(shadow.n_exits()) })
    }

    /// Per-exit variant uses `target_exits` when given, else the true exits.
    pub fn asr(&self, target_exits: Option<&[usize]>) -> Result<AsrPair> {
        let (_, g) = run_label_only_attack(&self.shadow, &self.target, self.n_exits, false, None, self.perturb.clone())?;
        let (_, p) =
            run_label_only_attack(&self.shadow, &self.target, self.n_exits, true, target_exits, self.perturb.clone())?;
        Ok(AsrPair { original: g.asr, hybrid: p.asr })
    }
}

/// Perturbation search settings scaled to `reference`.
pub fn perturb_config(reference: &TabularDataset, directions: usize, steps: usize, seed: u64) -> PerturbConfig {
    PerturbConfig { n_directions: directions, bisection_steps: steps, ..PerturbConfig::for_data(reference.view(), seed) }
}

/// Rows `[..m]` and `[n..n + m]` of exits listed as `n` members then `n`
/// non-members.
pub fn balanced_prefix(exits: &[usize], n: usize, m: usize) -> Vec<usize> {
    let m = m.min(n);
    exits[..m].iter().chain(&exits[n..n + m]).copied().collect()
}
