use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    cross_entropy, relu, relu_backward, softmax, DenseGrad, DenseLayer, NormCache, NormGrad, NormLayer, NormMode,
};
use crate::error::{Error, Result};

pub const MAX_EXITS: usize = 6;

/// Shape of a multi-exit fully connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub n_classes: usize,
    /// Hidden width of every backbone block and of the final classifier.
    pub width: usize,
    pub n_blocks: usize,
    /// Total exits, counting the backbone's own classifier.
    pub n_exits: usize,
    /// Hidden width of each exit head.
    pub head_hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, n_classes: usize, width: usize, n_blocks: usize, n_exits: usize) -> Self {
        Architecture { input_dim, n_classes, width, n_blocks, n_exits, head_hidden: width }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.n_classes < 2 || self.width == 0 || self.head_hidden == 0 {
            return bad(format!("degenerate architecture {self:?}"));
        }
        if self.n_blocks == 0 {
            return bad("backbone needs at least one block".into());
        }
        if !(1..=MAX_EXITS).contains(&self.n_exits) {
            return bad(format!("n_exits must be in [1, {MAX_EXITS}], got {}", self.n_exits));
        }
        if self.n_exits - 1 > self.n_blocks {
            return bad(format!("{} exit heads do not fit on {} blocks", self.n_exits - 1, self.n_blocks));
        }
        Ok(())
    }
}

/// Block indices after which the `n_heads` exit heads are attached.
///
/// Head `i` sits at fractional depth `(i + 1) / (n_heads + 1)` of the backbone
/// and is placed after the first block that reaches that depth.
pub fn exit_placement(n_blocks: usize, n_heads: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_heads);
    let k = n_heads + 1;
    for i in 0..n_heads {
        let mut idx = ((i + 1) * n_blocks).div_ceil(k).saturating_sub(1);
        if let Some(&prev) = out.last() {
            idx = idx.max(prev + 1);
        }
        out.push(idx.min(n_blocks - 1));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub dense: DenseLayer,
    pub norm: NormLayer,
}

impl Block {
    fn ops(&self) -> u64 {
        // dense + norm + rectifier
        self.dense.ops() + self.norm.ops() + self.dense.out_dim() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitHead {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl ExitHead {
    fn ops(&self) -> u64 {
        self.hidden.ops() + self.hidden.out_dim() as u64 + self.output.ops()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExitModel {
    pub arch: Architecture,
    pub blocks: Vec<Block>,
    /// Three dense layers with rectifiers in between.
    pub final_classifier: Vec<DenseLayer>,
    pub exit_heads: Vec<ExitHead>,
    pub exit_attach: Vec<usize>,
    /// Early-exit confidence threshold.
    pub tau: f64,
    pub ops_per_exit: Vec<u64>,
}

/// One sample's view of every exit.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub per_exit_probs: Vec<Vec<f64>>,
    pub per_exit_loss: Option<Vec<f64>>,
    /// Input of the last dense layer of the exit that fired.
    pub penultimate_feature: Vec<f64>,
    pub taken_exit: usize,
    pub predicted_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub exit: usize,
}

/// Batched outputs at every exit.
#[derive(Clone, Debug)]
pub struct ExitOutputs {
    pub logits: Vec<Array2<f64>>,
    pub probs: Vec<Array2<f64>>,
    pub penultimate: Vec<Array2<f64>>,
}

impl ExitOutputs {
    pub fn n_exits(&self) -> usize {
        self.probs.len()
    }

    pub fn n_samples(&self) -> usize {
        self.probs[0].nrows()
    }

    /// First exit whose top-class probability reaches `tau`, else the last.
    pub fn taken_exit(&self, row: usize, tau: f64) -> usize {
        taken_exit_rule((0..self.n_exits()).map(|e| max_prob(self.probs[e].row(row))), tau)
    }

    pub fn taken_exits(&self, tau: f64) -> Vec<usize> {
        (0..self.n_samples()).map(|r| self.taken_exit(r, tau)).collect()
    }

    pub fn losses(&self, exit: usize, labels: &[usize]) -> Vec<f64> {
        cross_entropy(&self.logits[exit], labels)
    }
}

pub(crate) fn max_prob(p: ArrayView1<f64>) -> f64 {
    p.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

pub(crate) fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Comparison is `>=`, so `tau = 1.0` can still fire on saturated outputs
/// and any `tau > 1` disables early exit.
pub fn taken_exit_rule(max_probs: impl IntoIterator<Item = f64>, tau: f64) -> usize {
    let mut last = 0;
    for (e, p) in max_probs.into_iter().enumerate() {
        if p >= tau {
            return e;
        }
        last = e;
    }
    last
}

/// Activations kept for backpropagation.
pub(crate) struct Trace {
    block_inputs: Vec<Array2<f64>>,
    norm_caches: Vec<NormCache>,
    norm_outputs: Vec<Array2<f64>>,
    block_outputs: Vec<Array2<f64>>,
    head_pre: Vec<Array2<f64>>,
    final_pre: Vec<Array2<f64>>,
    final_inputs: Vec<Array2<f64>>,
    pub(crate) outputs: ExitOutputs,
}

impl Trace {
    pub(crate) fn norm_stats(&self) -> impl Iterator<Item = Option<&(Array1<f64>, Array1<f64>)>> {
        self.norm_caches.iter().map(|c| c.batch_stats.as_ref())
    }
}

/// Parameter gradients mirroring the model layout.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub blocks: Vec<(DenseGrad, NormGrad)>,
    pub final_classifier: Vec<DenseGrad>,
    pub exit_heads: Vec<(DenseGrad, DenseGrad)>,
}

impl ModelGrads {
    /// Same traversal order as [`MultiExitModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (d, n) in &self.blocks {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        for d in &self.final_classifier {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for (h, o) in &self.exit_heads {
            for d in [h, o] {
                out.push(d.weights.as_slice().expect("standard layout"));
                out.push(d.bias.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

impl MultiExitModel {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, tau: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        let mut in_dim = arch.input_dim;
        for _ in 0..arch.n_blocks {
            blocks.push(Block { dense: DenseLayer::new(in_dim, arch.width, rng), norm: NormLayer::new(arch.width) });
            in_dim = arch.width;
        }
        let final_classifier = vec![
            DenseLayer::new(arch.width, arch.width, rng),
            DenseLayer::new(arch.width, arch.width, rng),
            DenseLayer::new(arch.width, arch.n_classes, rng),
        ];
        let exit_attach = exit_placement(arch.n_blocks, arch.n_exits - 1);
        let exit_heads = exit_attach
            .iter()
            .map(|_| ExitHead {
                hidden: DenseLayer::new(arch.width, arch.head_hidden, rng),
                output: DenseLayer::new(arch.head_hidden, arch.n_classes, rng),
            })
            .collect();
        let mut model =
            MultiExitModel { arch, blocks, final_classifier, exit_heads, exit_attach, tau, ops_per_exit: Vec::new() };
        model.ops_per_exit = model.compute_ops();
        Ok(model)
    }

    pub fn n_exits(&self) -> usize {
        self.exit_heads.len() + 1
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        for b in &mut self.blocks {
            b.norm.mode = mode;
        }
    }

    pub fn mode(&self) -> NormMode {
        self.blocks[0].norm.mode
    }

    fn compute_ops(&self) -> Vec<u64> {
        let mut cum_blocks = Vec::with_capacity(self.blocks.len());
        let mut acc = 0u64;
        for b in &self.blocks {
            acc += b.ops();
            cum_blocks.push(acc);
        }
        let mut heads_acc = 0u64;
        let mut out = Vec::with_capacity(self.n_exits());
        for (head, &at) in self.exit_heads.iter().zip(&self.exit_attach) {
            heads_acc += head.ops();
            out.push(cum_blocks[at] + heads_acc);
        }
        let fc = &self.final_classifier;
        let final_ops = fc.iter().map(DenseLayer::ops).sum::<u64>() + (fc[0].out_dim() + fc[1].out_dim()) as u64;
        out.push(acc + heads_acc + final_ops);
        out
    }

    /// Cumulative operation count of every layer executed up to and
    /// including `exit` (softmax excluded).
    pub fn count_ops(&self, exit: usize) -> Result<u64> {
        self.ops_per_exit.get(exit).copied().ok_or(Error::ExitOutOfRange { index: exit, n_exits: self.n_exits() })
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.arch.input_dim {
            return Err(Error::InputShape { expected: self.arch.input_dim, got: cols });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(x.ncols())?;
        let nb = self.blocks.len();
        let mut block_inputs = Vec::with_capacity(nb);
        let mut norm_caches = Vec::with_capacity(nb);
        let mut norm_outputs = Vec::with_capacity(nb);
        let mut block_outputs: Vec<Array2<f64>> = Vec::with_capacity(nb);
        for (i, b) in self.blocks.iter().enumerate() {
            let input = if i == 0 { x.to_owned() } else { block_outputs[i - 1].clone() };
            let z = b.dense.forward(input.view());
            let (n, cache) = b.norm.forward(z.view());
            let out = relu(&n);
            block_inputs.push(input);
            norm_caches.push(cache);
            norm_outputs.push(n);
            block_outputs.push(out);
        }

        let ne = self.n_exits();
        let mut logits = Vec::with_capacity(ne);
        let mut penultimate = Vec::with_capacity(ne);
        let mut head_pre = Vec::with_capacity(ne - 1);
        for (head, &at) in self.exit_heads.iter().zip(&self.exit_attach) {
            let pre = head.hidden.forward(block_outputs[at].view());
            let h = relu(&pre);
            logits.push(head.output.forward(h.view()));
            head_pre.push(pre);
            penultimate.push(h);
        }

        let fc = &self.final_classifier;
        let in0 = block_outputs[nb - 1].clone();
        let pre1 = fc[0].forward(in0.view());
        let h1 = relu(&pre1);
        let pre2 = fc[1].forward(h1.view());
        let h2 = relu(&pre2);
        logits.push(fc[2].forward(h2.view()));
        penultimate.push(h2.clone());

        let probs = logits.iter().map(softmax).collect();
        Ok(Trace {
            block_inputs,
            norm_caches,
            norm_outputs,
            block_outputs,
            head_pre,
            final_pre: vec![pre1, pre2],
            final_inputs: vec![in0, h1, h2],
            outputs: ExitOutputs { logits, probs, penultimate },
        })
    }

    /// Sign of every rectifier input (`true` when positive), flattened in a
    /// fixed order. Two inputs with equal patterns share one linear region,
    /// which gradient checks use to skip finite differences across a kink.
    pub fn rectifier_pattern(&self, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        let t = self.trace(x)?;
        Ok(t.norm_outputs
            .iter()
            .chain(&t.head_pre)
            .chain(&t.final_pre)
            .flat_map(|a| a.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect())
    }

    /// Outputs at every exit for a batch, in the current norm mode.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ExitOutputs> {
        Ok(self.trace(x)?.outputs)
    }

    /// Records every exit's output for one sample and applies the early-exit rule.
    pub fn forward_full(&self, x: &[f64], y: Option<usize>) -> Result<ForwardRecord> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let out = self.forward_batch(xv)?;
        if let Some(label) = y {
            if label >= self.n_classes() {
                return Err(Error::Config(format!("label {label} out of range for {} classes", self.n_classes())));
            }
        }
        let taken = out.taken_exit(0, self.tau);
        let per_exit_loss = y.map(|label| (0..out.n_exits()).map(|e| out.losses(e, &[label])[0]).collect());
        Ok(ForwardRecord {
            per_exit_probs: out.probs.iter().map(|p| p.row(0).to_vec()).collect(),
            per_exit_loss,
            penultimate_feature: out.penultimate[taken].row(0).to_vec(),
            taken_exit: taken,
            predicted_label: argmax(out.probs[taken].row(0)),
        })
    }

    /// Early-exit inference for one sample; later exits are never computed.
    pub fn predict_early(&self, x: &[f64]) -> Result<EarlyPrediction> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.predict_early_batch(xv)?.pop().expect("one row"))
    }

    /// Batched early-exit inference. Rows that exit are dropped from the
    /// working set before the next block runs.
    pub fn predict_early_batch(&self, x: ArrayView2<f64>) -> Result<Vec<EarlyPrediction>> {
        self.check_input(x.ncols())?;
        let n = x.nrows();
        let mut results: Vec<Option<EarlyPrediction>> = vec![None; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut h = x.to_owned();
        let mut next_head = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if active.is_empty() {
                break;
            }
            let z = b.dense.forward(h.view());
            let (nrm, _) = b.norm.forward(z.view());
            h = relu(&nrm);
            while next_head < self.exit_heads.len() && self.exit_attach[next_head] == i {
                let head = &self.exit_heads[next_head];
                let probs = softmax(&head.output.forward(relu(&head.hidden.forward(h.view())).view()));
                let mut keep = Vec::with_capacity(active.len());
                for (r, &sample) in active.iter().enumerate() {
                    let row = probs.row(r);
                    if max_prob(row) >= self.tau {
                        results[sample] = Some(EarlyPrediction { probs: row.to_vec(), label: argmax(row), exit: next_head });
                    } else {
                        keep.push(r);
                    }
                }
                if keep.len() != active.len() {
                    h = h.select(Axis(0), &keep);
                    active = keep.iter().map(|&r| active[r]).collect();
                }
                next_head += 1;
                if active.is_empty() {
                    break;
                }
            }
        }
        if !active.is_empty() {
            let fc = &self.final_classifier;
            let h1 = relu(&fc[0].forward(h.view()));
            let h2 = relu(&fc[1].forward(h1.view()));
            let probs = softmax(&fc[2].forward(h2.view()));
            let last = self.n_exits() - 1;
            for (r, &sample) in active.iter().enumerate() {
                let row = probs.row(r);
                results[sample] = Some(EarlyPrediction { probs: row.to_vec(), label: argmax(row), exit: last });
            }
        }
        Ok(results.into_iter().map(|r| r.expect("every row resolved")).collect())
    }

    /// Mean over the batch of the summed cross-entropy across all exits.
    pub fn joint_loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let out = self.forward_batch(x)?;
        let n = labels.len() as f64;
        Ok((0..out.n_exits()).map(|e| out.losses(e, labels).iter().sum::<f64>()).sum::<f64>() / n)
    }

    /// Backpropagates the batch-mean of the unweighted sum of per-exit
    /// cross-entropies. Returns the loss and parameter gradients.
    pub(crate) fn backward(&self, trace: &Trace, labels: &[usize]) -> (f64, ModelGrads) {
        let n = labels.len() as f64;
        let out = &trace.outputs;
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(out.n_exits());
        for e in 0..out.n_exits() {
            loss += out.losses(e, labels).iter().sum::<f64>() / n;
            let mut g = out.probs[e].clone();
            for (r, &y) in labels.iter().enumerate() {
                g[[r, y]] -= 1.0;
            }
            g /= n;
            d_logits.push(g);
        }

        let nb = self.blocks.len();
        let mut d_block_out: Vec<Option<Array2<f64>>> = vec![None; nb];
        let add = |slot: &mut Option<Array2<f64>>, g: Array2<f64>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };

        let mut head_grads = Vec::with_capacity(self.exit_heads.len());
        for (k, (head, &at)) in self.exit_heads.iter().zip(&self.exit_attach).enumerate() {
            let (mut dh, g_out) = head.output.backward(out.penultimate[k].view(), d_logits[k].view());
            relu_backward(&trace.head_pre[k], &mut dh);
            let (d_in, g_hidden) = head.hidden.backward(trace.block_outputs[at].view(), dh.view());
            add(&mut d_block_out[at], d_in);
            head_grads.push((g_hidden, g_out));
        }

        let fc = &self.final_classifier;
        let last = out.n_exits() - 1;
        let (mut d2, g3) = fc[2].backward(trace.final_inputs[2].view(), d_logits[last].view());
        relu_backward(&trace.final_pre[1], &mut d2);
        let (mut d1, g2) = fc[1].backward(trace.final_inputs[1].view(), d2.view());
        relu_backward(&trace.final_pre[0], &mut d1);
        let (d0, g1) = fc[0].backward(trace.final_inputs[0].view(), d1.view());
        add(&mut d_block_out[nb - 1], d0);

        let mut block_grads = Vec::with_capacity(nb);
        for i in (0..nb).rev() {
            let b = &self.blocks[i];
            let mut g = d_block_out[i].take().unwrap_or_else(|| Array2::zeros(trace.block_outputs[i].raw_dim()));
            relu_backward(&trace.norm_outputs[i], &mut g);
            let (dz, ng) = b.norm.backward(&trace.norm_caches[i], g.view());
            let (dx, dg) = b.dense.backward(trace.block_inputs[i].view(), dz.view());
            if i > 0 {
                add(&mut d_block_out[i - 1], dx);
            }
            block_grads.push((dg, ng));
        }
        block_grads.reverse();
        (loss, ModelGrads { blocks: block_grads, final_classifier: vec![g1, g2, g3], exit_heads: head_grads })
    }

    /// Loss and gradients of the joint objective on a batch, without touching
    /// running statistics.
    pub fn loss_and_grads(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, ModelGrads)> {
        let trace = self.trace(x)?;
        Ok(self.backward(&trace, labels))
    }

    /// Mutable views of every trainable tensor, in a fixed order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.dense.weights.as_slice_mut().expect("standard layout"));
            out.push(b.dense.bias.as_slice_mut().expect("standard layout"));
            out.push(b.norm.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.norm.beta.as_slice_mut().expect("standard layout"));
        }
        for d in &mut self.final_classifier {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        for head in &mut self.exit_heads {
            for d in [&mut head.hidden, &mut head.output] {
                out.push(d.weights.as_slice_mut().expect("standard layout"));
                out.push(d.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn n_params(&mut self) -> usize {
        self.param_slices_mut().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.dense.is_finite() && b.norm.gamma.iter().chain(b.norm.beta.iter()).all(|v| v.is_finite()))
            && self.final_classifier.iter().all(DenseLayer::is_finite)
            && self.exit_heads.iter().all(|h| h.hidden.is_finite() && h.output.is_finite())
    }

    fn exit_output_layer(&self, exit: usize) -> &DenseLayer {
        if exit < self.exit_heads.len() {
            &self.exit_heads[exit].output
        } else {
            &self.final_classifier[2]
        }
    }

    /// Flattened gradient of the cross-entropy at `exit` with respect to that
    /// exit's last dense layer: weights (row-major) followed by bias.
    pub fn last_layer_gradient(&self, x: &[f64], y: usize, exit: usize) -> Result<Vec<f64>> {
        if exit >= self.n_exits() {
            return Err(Error::ExitOutOfRange { index: exit, n_exits: self.n_exits() });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let out = self.forward_batch(xv)?;
        Ok(last_layer_gradient_from(out.probs[exit].row(0), out.penultimate[exit].row(0), y))
    }

    /// Penultimate width of the given exit.
    pub fn penultimate_dim(&self, exit: usize) -> usize {
        self.exit_output_layer(exit).in_dim()
    }

    /// Fraction of rows whose early-exit prediction matches the label.
    pub fn early_exit_accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict_early_batch(x)?;
        let hits = preds.iter().zip(labels).filter(|(p, &y)| p.label == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// `(p - onehot(y)) ⊗ h` followed by `p - onehot(y)`.
pub fn last_layer_gradient_from(probs: ArrayView1<f64>, penult: ArrayView1<f64>, y: usize) -> Vec<f64> {
    let mut delta = probs.to_owned();
    delta[y] -= 1.0;
    let mut out = Vec::with_capacity(delta.len() * (penult.len() + 1));
    for &d in &delta {
        out.extend(penult.iter().map(|&h| d * h));
    }
    out.extend(delta.iter());
    out
}

/// Rows of `x` selected by `idx`.
pub fn select_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}
