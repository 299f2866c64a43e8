#![allow(dead_code)]

use exitaudit::nn::{Architecture, MultiExitModel, NormMode};
use exitaudit::seed::rng_from;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation moved some rectifier across its
    /// kink; the function is not differentiable there.
    pub skipped_kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exactly-zero gradients
/// (e.g. dense biases feeding a batch norm) from dividing round-off by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks every parameter of `model` on the joint training loss in train mode.
pub fn check_all_gradients(model: &mut MultiExitModel, x: &Array2<f64>, y: &[usize], step: f64) -> GradCheck {
    model.set_mode(NormMode::Train);
    let (_, grads) = model.loss_and_grads(x.view(), y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let base_pattern = model.rectifier_pattern(x.view()).unwrap();
    let mut out = GradCheck::default();
    for (slot, a_slot) in analytic.iter().enumerate() {
        for (i, &a) in a_slot.iter().enumerate() {
            let orig = model.param_slices_mut()[slot][i];
            model.param_slices_mut()[slot][i] = orig + step;
            let lp = model.joint_loss(x.view(), y).unwrap();
            let pp = model.rectifier_pattern(x.view()).unwrap();
            model.param_slices_mut()[slot][i] = orig - step;
            let lm = model.joint_loss(x.view(), y).unwrap();
            let pm = model.rectifier_pattern(x.view()).unwrap();
            model.param_slices_mut()[slot][i] = orig;
            if pp != base_pattern || pm != base_pattern {
                out.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
            out.checked += 1;
        }
    }
    model.set_mode(NormMode::Eval);
    out
}

/// Small random multi-exit model with a random batch.
pub fn random_small_model(seed: u64) -> (MultiExitModel, Array2<f64>, Vec<usize>) {
    let mut rng = rng_from(seed);
    let input_dim = rng.gen_range(3..7);
    let n_classes = rng.gen_range(2..5);
    let width = rng.gen_range(4..8);
    let n_blocks = rng.gen_range(2..5);
    let n_exits = rng.gen_range(1..=n_blocks + 1).min(6);
    let mut arch = Architecture::new(input_dim, n_classes, width, n_blocks, n_exits);
    arch.head_hidden = rng.gen_range(3..7);
    let model = MultiExitModel::new(arch, 0.5, &mut rng).unwrap();
    let batch = rng.gen_range(4..9);
    let x = Array2::from_shape_fn((batch, input_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let y = (0..batch).map(|_| rng.gen_range(0..n_classes)).collect();
    (model, x, y)
}
