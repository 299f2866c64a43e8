use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::{last_layer_gradient_from, MultiExitModel};
use crate::seed::rng_from;

/// One sample's attack-model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFeatureRecord {
    pub score: Vec<f64>,
    pub penult_feature: Vec<f64>,
    pub loss: f64,
    pub last_grad: Vec<f64>,
    pub label_onehot: Vec<f64>,
    pub exit_onehot: Option<Vec<f64>>,
    pub is_member: bool,
}

/// Where the attacker's exit indices come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ExitSource {
    None,
    /// The served model reports the exit it took.
    Direct,
    /// Exit indices recovered by some side channel, one per member and per
    /// non-member row (before balancing), encoded with `n_exits` slots.
    Observed { member: Vec<usize>, nonmember: Vec<usize>, n_exits: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Compute last-layer gradients (large; only the gradient attack needs them).
    pub gradients: bool,
    /// Take the gradient at the final exit instead of the exit that fired.
    pub gradient_at_final: bool,
}

/// Attack inputs in columnar form; members occupy the first half of the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackDataset {
    /// Raw probability vector of the exit that fired.
    pub scores: Array2<f64>,
    /// Zero-padded to the widest exit.
    pub penult: Array2<f64>,
    pub loss: Vec<f64>,
    pub grads: Option<Array2<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Exit that actually fired.
    pub taken_exit: Vec<usize>,
    /// Exit index visible to the attacker and the one-hot width.
    pub exit: Option<(Vec<usize>, usize)>,
    pub member: Vec<bool>,
}

pub(crate) fn one_hot(idx: &[usize], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((idx.len(), width));
    for (r, &i) in idx.iter().enumerate() {
        m[[r, i.min(width - 1)]] = 1.0;
    }
    m
}

/// Probability rows sorted in descending order.
pub fn sorted_scores(scores: ArrayView2<f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        let mut v = row.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        row.assign(&ndarray::Array1::from(v));
    }
    out
}

/// Stacks `members` and `nonmembers` (each truncated to the smaller size),
/// queries `model` and records the attack inputs at the exit that fired.
pub fn build_attack_dataset(
    model: &MultiExitModel,
    members: &TabularDataset,
    nonmembers: &TabularDataset,
    exits: &ExitSource,
    opts: RecordOptions,
) -> Result<AttackDataset> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Empty("member or non-member set"));
    }
    let n = members.len().min(nonmembers.len());
    let x = concatenate(Axis(0), &[members.features.slice(s![..n, ..]), nonmembers.features.slice(s![..n, ..])])
        .expect("same width");
    let labels: Vec<usize> = members.labels[..n].iter().chain(&nonmembers.labels[..n]).copied().collect();
    let member: Vec<bool> = (0..2 * n).map(|i| i < n).collect();

    let out = model.forward_batch(x.view())?;
    let taken = out.taken_exits(model.tau);
    let width = (0..model.n_exits()).map(|e| model.penultimate_dim(e)).max().expect("at least one exit");
    let k = model.n_classes();
    let mut scores = Array2::zeros((2 * n, k));
    let mut penult = Array2::zeros((2 * n, width));
    let mut loss = Vec::with_capacity(2 * n);
    let mut grads = opts.gradients.then(|| Array2::zeros((2 * n, k * (width + 1))));
    let last = model.n_exits() - 1;
    for r in 0..2 * n {
        let e = taken[r];
        scores.row_mut(r).assign(&out.probs[e].row(r));
        let pd = out.penultimate[e].ncols();
        penult.slice_mut(s![r, ..pd]).assign(&out.penultimate[e].row(r));
        loss.push(crate::nn::cross_entropy(&out.logits[e].slice(s![r..r + 1, ..]).to_owned(), &labels[r..r + 1])[0]);
        if let Some(g) = grads.as_mut() {
            let ge = if opts.gradient_at_final { last } else { e };
            let mut h = ndarray::Array1::zeros(width);
            h.slice_mut(s![..out.penultimate[ge].ncols()]).assign(&out.penultimate[ge].row(r));
            let v = last_layer_gradient_from(out.probs[ge].row(r), h.view(), labels[r]);
            g.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
        }
    }

    let exit = match exits {
        ExitSource::None => None,
        ExitSource::Direct => Some((taken.clone(), model.n_exits())),
        ExitSource::Observed { member: m, nonmember: nm, n_exits } => {
            if m.len() < n || nm.len() < n {
                return Err(Error::Config("observed exits shorter than the evaluation sets".into()));
            }
            if *n_exits == 0 {
                return Err(Error::Config("observed exit count must be positive".into()));
            }
            Some((m[..n].iter().chain(&nm[..n]).copied().collect(), *n_exits))
        }
    };

    Ok(AttackDataset { scores, penult, loss, grads, labels, n_classes: k, taken_exit: taken, exit, member })
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.member.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member.is_empty()
    }

    pub fn exit_onehot(&self) -> Option<Array2<f64>> {
        self.exit.as_ref().map(|(idx, w)| one_hot(idx, *w))
    }

    pub fn label_onehot(&self) -> Array2<f64> {
        one_hot(&self.labels, self.n_classes)
    }

    /// Same inputs with the exit information removed.
    pub fn without_exits(&self) -> AttackDataset {
        AttackDataset { exit: None, ..self.clone() }
    }

    /// Same inputs with the membership bits randomly permuted.
    pub fn permuted_membership(&self, seed: u64) -> AttackDataset {
        let mut member = self.member.clone();
        member.shuffle(&mut rng_from(seed));
        AttackDataset { member, ..self.clone() }
    }

    /// Penultimate features and gradients truncated or zero-padded to `w`
    /// units, so records of a model with another width fit an attack model.
    pub fn with_penult_width(&self, w: usize) -> AttackDataset {
        let (n, old) = self.penult.dim();
        let keep = old.min(w);
        let mut penult = Array2::zeros((n, w));
        penult.slice_mut(s![.., ..keep]).assign(&self.penult.slice(s![.., ..keep]));
        let k = self.n_classes;
        let grads = self.grads.as_ref().map(|g| {
            let mut out = Array2::zeros((n, k * (w + 1)));
            for c in 0..k {
                out.slice_mut(s![.., c * w..c * w + keep]).assign(&g.slice(s![.., c * old..c * old + keep]));
            }
            out.slice_mut(s![.., k * w..]).assign(&g.slice(s![.., k * old..]));
            out
        });
        AttackDataset { penult, grads, ..self.clone() }
    }

    pub fn loss_column(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), 1), self.loss.clone()).expect("n × 1")
    }

    pub fn records(&self) -> Vec<AttackFeatureRecord> {
        let labels = self.label_onehot();
        let exits = self.exit_onehot();
        (0..self.len())
            .map(|r| AttackFeatureRecord {
                score: self.scores.row(r).to_vec(),
                penult_feature: self.penult.row(r).to_vec(),
                loss: self.loss[r],
                last_grad: self.grads.as_ref().map(|g| g.row(r).to_vec()).unwrap_or_default(),
                label_onehot: labels.row(r).to_vec(),
                exit_onehot: exits.as_ref().map(|e| e.row(r).to_vec()),
                is_member: self.member[r],
            })
            .collect()
    }

    /// One row per record: `member, label, exit, loss, score_*, feature_*,
    /// grad_*`. `exit` is empty when no exit information is present and the
    /// gradient columns are omitted when gradients were not computed.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["member".to_string(), "label".into(), "exit".into(), "loss".into()];
        header.extend((0..self.scores.ncols()).map(|j| format!("score_{j}")));
        header.extend((0..self.penult.ncols()).map(|j| format!("feature_{j}")));
        if let Some(g) = &self.grads {
            header.extend((0..g.ncols()).map(|j| format!("grad_{j}")));
        }
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = vec![
                u8::from(self.member[r]).to_string(),
                self.labels[r].to_string(),
                self.exit.as_ref().map(|(e, _)| e[r].to_string()).unwrap_or_default(),
                format!("{:?}", self.loss[r]),
            ];
            rec.extend(self.scores.row(r).iter().map(|v| format!("{v:?}")));
            rec.extend(self.penult.row(r).iter().map(|v| format!("{v:?}")));
            if let Some(g) = &self.grads {
                rec.extend(g.row(r).iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
