//! Membership inference against multi-exit models: score, gradient and
//! label-only attacks, their exit-aware hybrids, exit-count stealing and the
//! score-only exit classifier.

mod label_only;
mod mlp;
mod model;
mod records;
mod stealing;

use serde::{Deserialize, Serialize};

pub use label_only::{
    best_threshold, feature_space_sd, label_only_inputs, perturbation_magnitude, perturbation_magnitudes,
    run_label_only_attack, LabelOnlyDecision, LabelOnlyInputs, LabelOnlyResult, PerturbConfig, MIN_BUCKET,
};
pub use mlp::{train_classifier, Mlp, Standardizer};
pub use model::{asr_of, components, train_attack_model, AttackMode, AttackModel, AttackTrainConfig};
pub use records::{
    build_attack_dataset, sorted_scores, AttackDataset, AttackFeatureRecord, ExitSource, RecordOptions,
};
pub use stealing::{adaptive_exit_classifier, count_exits, count_from_indices, ExitClassifier, ExitCount};

use crate::data::TabularDataset;
use crate::error::Result;
use crate::nn::MultiExitModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// The service reports the exit index with each prediction.
    A1DirectExit,
    /// Exit indices recovered from response times.
    A2TimingExit,
    /// Shadow architecture or shadow data differ from the target's.
    A3Mismatched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowData {
    #[default]
    SameDistribution,
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub adversary: Adversary,
    /// Shadow backbone width; `None` copies the target's.
    pub shadow_width: Option<usize>,
    pub shadow_data: ShadowData,
}

/// Builds target records and scores them with a trained attack model.
pub fn run_inference_attack(
    attack: &AttackModel,
    target: &MultiExitModel,
    members: &TabularDataset,
    nonmembers: &TabularDataset,
    exits: &ExitSource,
) -> Result<f64> {
    let opts = RecordOptions { gradients: attack.mode == AttackMode::GradientBased, gradient_at_final: false };
    let ds = build_attack_dataset(target, members, nonmembers, exits, opts)?;
    attack.asr(&ds)
}
