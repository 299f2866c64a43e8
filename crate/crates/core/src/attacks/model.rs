use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{ce_grad, Mlp, Standardizer};
use super::records::{sorted_scores, AttackDataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, relu, relu_backward, softmax, Adam, TrainConfig};
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Black box: the sorted prediction score only.
    ScoreBased,
    /// White box: score, penultimate feature, loss, last-layer gradient and
    /// label, each through its own encoder.
    GradientBased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub encoder_width: usize,
    pub head_widths: [usize; 3],
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        AttackTrainConfig { epochs: 30, batch_size: 64, learning_rate: 1e-3, seed: 0, encoder_width: 64, head_widths: [256, 128, 64] }
    }
}

impl AttackTrainConfig {
    fn adam(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, learning_rate: self.learning_rate, seed: self.seed, ..Default::default() }
    }
}

/// Binary member / non-member classifier over attack records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub mode: AttackMode,
    pub uses_exit: bool,
    pub component_dims: Vec<usize>,
    pub standardizers: Vec<Standardizer>,
    /// One per component in gradient mode, none in score mode.
    pub encoders: Vec<Mlp>,
    /// Four dense layers ending in two logits.
    pub head: Mlp,
}

/// Attack inputs for `mode`, in a fixed component order with the exit
/// one-hot (if any) last.
pub fn components(ds: &AttackDataset, mode: AttackMode) -> Vec<Array2<f64>> {
    let mut out = match mode {
        AttackMode::ScoreBased => vec![sorted_scores(ds.scores.view())],
        AttackMode::GradientBased => {
            let mut v = vec![ds.scores.clone(), ds.penult.clone(), ds.loss_column()];
            if let Some(g) = &ds.grads {
                v.push(g.clone());
            }
            v.push(ds.label_onehot());
            v
        }
    };
    if let Some(e) = ds.exit_onehot() {
        out.push(e);
    }
    out
}

struct Pass {
    logits: Array2<f64>,
    enc_caches: Vec<super::mlp::MlpCache>,
    enc_pre: Vec<Array2<f64>>,
    head_cache: super::mlp::MlpCache,
}

impl AttackModel {
    fn forward_pass(&self, comps: &[ArrayView2<f64>]) -> Pass {
        if self.encoders.is_empty() {
            let views: Vec<_> = comps.to_vec();
            let x = concatenate(Axis(1), &views).expect("same rows");
            let (logits, head_cache) = self.head.forward_cached(x.view());
            return Pass { logits, enc_caches: Vec::new(), enc_pre: Vec::new(), head_cache };
        }
        let mut enc_caches = Vec::with_capacity(comps.len());
        let mut enc_pre = Vec::with_capacity(comps.len());
        let mut embeds = Vec::with_capacity(comps.len());
        for (enc, c) in self.encoders.iter().zip(comps) {
            let (z, cache) = enc.forward_cached(c.view());
            embeds.push(relu(&z));
            enc_pre.push(z);
            enc_caches.push(cache);
        }
        let views: Vec<_> = embeds.iter().map(|e| e.view()).collect();
        let x = concatenate(Axis(1), &views).expect("same rows");
        let (logits, head_cache) = self.head.forward_cached(x.view());
        Pass { logits, enc_caches, enc_pre, head_cache }
    }

    fn backward_pass(&self, pass: &Pass, grad_logits: Array2<f64>) -> Vec<Vec<f64>> {
        let (g_in, head_grads) = self.head.backward(&pass.head_cache, grad_logits);
        let mut out = Vec::new();
        let mut col = 0;
        for (k, enc) in self.encoders.iter().enumerate() {
            let w = enc.out_dim();
            let mut g = g_in.slice(s![.., col..col + w]).to_owned();
            col += w;
            relu_backward(&pass.enc_pre[k], &mut g);
            out.extend(enc.backward(&pass.enc_caches[k], g).1);
        }
        out.extend(head_grads);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.param_slices_mut());
        }
        out.extend(self.head.param_slices_mut());
        out
    }

    fn prepare(&self, ds: &AttackDataset) -> Result<Vec<Array2<f64>>> {
        if ds.exit.is_some() != self.uses_exit {
            return Err(Error::Config(format!(
                "attack model {} exit information but the records {}",
                if self.uses_exit { "expects" } else { "does not take" },
                if ds.exit.is_some() { "carry it" } else { "do not" }
            )));
        }
        let comps = components(ds, self.mode);
        let dims: Vec<usize> = comps.iter().map(|c| c.ncols()).collect();
        if dims != self.component_dims {
            return Err(Error::InputShape { expected: self.component_dims.iter().sum(), got: dims.iter().sum() });
        }
        Ok(comps.iter().zip(&self.standardizers).map(|(c, s)| s.apply(c.view())).collect())
    }

    /// Probability that each record is a member.
    pub fn predict_member_proba(&self, ds: &AttackDataset) -> Result<Vec<f64>> {
        let comps = self.prepare(ds)?;
        let views: Vec<_> = comps.iter().map(|c| c.view()).collect();
        let p = softmax(&self.forward_pass(&views).logits);
        Ok(p.column(1).to_vec())
    }

    /// Fraction of correct membership decisions at the 0.5 cut.
    pub fn asr(&self, ds: &AttackDataset) -> Result<f64> {
        let p = self.predict_member_proba(ds)?;
        let pred: Vec<bool> = p.iter().map(|&v| v > 0.5).collect();
        Ok(asr_of(&pred, &ds.member))
    }
}

/// Accuracy of membership decisions.
pub fn asr_of(pred: &[bool], member: &[bool]) -> f64 {
    assert_eq!(pred.len(), member.len());
    if pred.is_empty() {
        return 0.5;
    }
    pred.iter().zip(member).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Trains an attack model on shadow records. The exit one-hot is used when
/// the records carry one.
pub fn train_attack_model(ds: &AttackDataset, mode: AttackMode, cfg: &AttackTrainConfig) -> Result<AttackModel> {
    if ds.is_empty() {
        return Err(Error::Empty("attack records"));
    }
    let n_members = ds.member.iter().filter(|&&m| m).count();
    if n_members == 0 || n_members == ds.len() {
        return Err(Error::SingleClass);
    }
    if mode == AttackMode::GradientBased && ds.grads.is_none() {
        return Err(Error::Config("gradient attack needs records built with gradients".into()));
    }
    let raw = components(ds, mode);
    let standardizers: Vec<Standardizer> = raw.iter().map(|c| Standardizer::fit(c.view())).collect();
    let comps: Vec<Array2<f64>> = raw.iter().zip(&standardizers).map(|(c, s)| s.apply(c.view())).collect();
    let component_dims: Vec<usize> = comps.iter().map(|c| c.ncols()).collect();

    let mut rng = rng_from(cfg.seed);
    let encoders: Vec<Mlp> = match mode {
        AttackMode::ScoreBased => Vec::new(),
        AttackMode::GradientBased => {
            component_dims.iter().map(|&d| Mlp::new(&[d, cfg.encoder_width, cfg.encoder_width], &mut rng)).collect()
        }
    };
    let head_in = if encoders.is_empty() { component_dims.iter().sum() } else { encoders.len() * cfg.encoder_width };
    let [h1, h2, h3] = cfg.head_widths;
    let head = Mlp::new(&[head_in, h1, h2, h3, 2], &mut rng);
    let mut model =
        AttackModel { mode, uses_exit: ds.exit.is_some(), component_dims, standardizers, encoders, head };

    let tc = cfg.adam();
    tc.validate()?;
    let mut adam = Adam::new(&tc);
    let labels: Vec<usize> = ds.member.iter().map(|&m| usize::from(m)).collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut shuffle_rng = rng_from(crate::seed::derive_seed(cfg.seed, "attack-batches"));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Array2<f64>> = comps.iter().map(|c| c.select(Axis(0), chunk)).collect();
            let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let pass = model.forward_pass(&views);
            let loss: f64 = cross_entropy(&pass.logits, &yb).iter().sum();
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let grads = model.backward_pass(&pass, ce_grad(&pass.logits, &yb));
            let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(model.param_slices_mut(), grads);
        }
    }
    Ok(model)
}
