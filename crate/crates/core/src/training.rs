//! Classifier head, Adam, per-batch forward/backward passes (serial BPTT or
//! MGRIT), inference and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledSequenceSet};
use crate::error::{Error, Result};
use crate::grid::{build_hierarchy, propagate, Hierarchy, Sequence, TimeStepper};
use crate::gru::{CellKind, GruStack};
use crate::mgrit::{ConvergenceReport, CycleConfig, Lanes, Mgrit};
use crate::numerics::{DenseMatrix, DenseVector};
use crate::propagation::{assemble_gradient, record_tapes, serial_backward, serial_forward, GruAdjoint, GruForward};

/// Affine map from the top hidden state to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl ClassifierHead {
    pub fn zeros(hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(num_classes, hidden_dim),
            bias: DenseVector::zeros(num_classes),
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut head = Self::zeros(hidden_dim, num_classes);
        for t in head.tensors_mut() {
            for v in t.iter_mut() {
                *v = rand::RngExt::random_range(rng, -k..=k);
            }
        }
        head
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.weights.as_slice(), &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.as_mut_slice(), &mut self.bias]
    }

    pub fn logits(&self, h: &[f64]) -> DenseVector {
        (0..self.num_classes())
            .map(|c| self.bias[c] + self.weights.row(c).iter().zip(h).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub logits: DenseVector,
    /// Gradient of the loss with respect to the hidden state fed to the head.
    pub w_t: DenseVector,
    pub head_grad: ClassifierHead,
}

/// Softmax cross-entropy of `head(h_t)` against `label`, with exact
/// gradients for `h_t` and the head.
pub fn loss_and_terminal_cotangent(head: &ClassifierHead, h_t: &DenseVector, label: usize) -> Result<LossOutput> {
    let classes = head.num_classes();
    if label >= classes {
        return Err(Error::InvalidArgument(format!("label {label} is out of range for {classes} classes")));
    }
    if h_t.dim() != head.hidden_dim() {
        return Err(Error::shape("classifier head input", head.hidden_dim(), h_t.dim()));
    }
    let logits = head.logits(h_t);
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if logits[label] == top {
        // ln(1 + Σ_{i≠y} e^{l_i - l_y}) keeps tiny losses accurate
        let rest: f64 = (0..classes).filter(|&i| i != label).map(|i| (logits[i] - top).exp()).sum();
        rest.ln_1p()
    } else {
        top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - logits[label]
    };
    let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    let mut dlogits: DenseVector = logits.iter().map(|l| (l - top).exp() / denom).collect();
    dlogits[label] -= 1.0;

    let mut head_grad = ClassifierHead::zeros(head.hidden_dim(), classes);
    let mut w_t = DenseVector::zeros(h_t.dim());
    for c in 0..classes {
        let g = dlogits[c];
        head_grad.bias[c] = g;
        let row = &mut head_grad.weights.as_mut_slice()[c * h_t.dim()..(c + 1) * h_t.dim()];
        for (j, r) in row.iter_mut().enumerate() {
            *r = g * h_t[j];
            w_t[j] += g * head.weights.get(c, j);
        }
    }
    Ok(LossOutput { loss, logits, w_t, head_grad })
}

/// A GRU stack with its classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub stack: GruStack,
    pub head: ClassifierHead,
    pub kind: CellKind,
    /// Fine-grid step size of the GRU ODE.
    pub dt: f64,
}

impl Model {
    pub fn init(layers: usize, input_dim: usize, hidden_dim: usize, num_classes: usize, kind: CellKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = GruStack::init(layers, input_dim, hidden_dim, &mut rng);
        let head = ClassifierHead::init(hidden_dim, num_classes, &mut rng);
        Self { stack, head, kind, dt: 1.0 }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in self.stack.layers_mut() {
            out.extend(p.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for p in self.stack.layers() {
            out.extend(p.tensors().iter().map(|t| t.len()));
        }
        out.extend(self.head.tensors().iter().map(|t| t.len()));
        out
    }
}

/// Gradient of the mean batch loss, shaped like a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub stack: GruStack,
    pub head: ClassifierHead,
}

impl ModelGrad {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for p in self.stack.layers() {
            out.extend(p.tensors());
        }
        out.extend(self.head.tensors());
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &ModelGrad) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(&model.parameter_sizes())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape("adam_step tensors", state.m.len(), params.len().min(grads.len())));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(Error::shape("adam_step tensor", m.len(), if p.len() != m.len() { p.len() } else { g.len() }));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// How hidden states (and adjoints) are computed.
#[derive(Debug, Clone, PartialEq)]
pub enum PropagationMode {
    Serial,
    Mgrit(CycleConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub correct: usize,
    pub predictions: Vec<usize>,
    pub grad: ModelGrad,
    pub fwd_residual: Option<f64>,
    pub bwd_residual: Option<f64>,
}

fn hierarchy_for(steps: usize, config: &CycleConfig) -> Result<Hierarchy> {
    config.validate()?;
    build_hierarchy(steps, config.cf, config.levels)
}

fn check_batch(model: &Model, batch: &Batch) -> Result<()> {
    if batch.size() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let steps = batch.inputs.steps();
    if let Some(&bad) = batch.lengths.iter().find(|&&l| l == 0 || l > steps) {
        return Err(Error::InvalidArgument(format!("sequence length {bad} outside 1..={steps}")));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= model.head.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    Ok(())
}

fn forward_states<L: Lanes>(fwd: &GruForward<'_>, mode: &PropagationMode, lanes: &L) -> Result<Sequence> {
    let zero = DenseVector::zeros(fwd.state_dim());
    match mode {
        PropagationMode::Serial => Ok(propagate(fwd, 0, zero, fwd.steps(), None)),
        PropagationMode::Mgrit(config) => {
            let hierarchy = hierarchy_for(fwd.steps(), config)?;
            let mut h = Sequence::zeros(fwd.steps(), zero.dim());
            let solver = Mgrit::new(fwd, &hierarchy, config.fine_relax, lanes);
            for _ in 0..config.fwd_iters {
                solver.cycle(&mut h, None)?;
            }
            Ok(h)
        }
    }
}

/// Slice of the flat state holding the top layer of sample `b`.
fn top_block(stack: &GruStack, batch: usize, b: usize) -> std::ops::Range<usize> {
    let h = stack.hidden_dim();
    let off = (stack.num_layers() - 1) * batch * h + b * h;
    off..off + h
}

struct LossTerms {
    loss: f64,
    correct: usize,
    predictions: Vec<usize>,
    head_grad: ClassifierHead,
    /// Per-sample `∂loss/∂h` placed at each sample's last real index.
    source: Sequence,
}

fn loss_terms(model: &Model, batch: &Batch, h: &Sequence) -> Result<LossTerms> {
    let bsz = batch.size();
    let mut source = Sequence::zeros(h.steps(), h.dim());
    let mut head_grad = ClassifierHead::zeros(model.head.hidden_dim(), model.head.num_classes());
    let (mut loss, mut correct) = (0.0, 0);
    let mut predictions = Vec::with_capacity(bsz);
    let scale = 1.0 / bsz as f64;
    for b in 0..bsz {
        let range = top_block(&model.stack, bsz, b);
        let len = batch.lengths[b];
        let top = DenseVector(h[len][range.clone()].to_vec());
        let out = loss_and_terminal_cotangent(&model.head, &top, batch.labels[b])?;
        loss += out.loss * scale;
        let pred = argmax(&out.logits);
        correct += usize::from(pred == batch.labels[b]);
        predictions.push(pred);
        for (dst, src) in head_grad.tensors_mut().into_iter().zip(out.head_grad.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
        for (d, s) in source[len][range].iter_mut().zip(out.w_t.iter()) {
            *d += s * scale;
        }
    }
    Ok(LossTerms { loss, correct, predictions, head_grad, source })
}

/// Runs the adjoint cycles in reversed time; returns `w` in forward order.
fn adjoint_cycles<L: Lanes>(
    adjoint: &GruAdjoint<'_>,
    hierarchy: &Hierarchy,
    config: &CycleConfig,
    lanes: &L,
    source: &Sequence,
    interior: bool,
    mut after_cycle: impl FnMut(&Mgrit<'_, GruAdjoint<'_>, L>, &Sequence, Option<&Sequence>) -> Result<()>,
) -> Result<Sequence> {
    let steps = source.steps();
    let mut v = Sequence::zeros(steps, source.dim());
    v[0] = source[steps].clone();
    let forcing = interior.then(|| source.reversed());
    let solver = Mgrit::new(adjoint, hierarchy, config.fine_relax, lanes);
    for _ in 0..config.bwd_iters {
        solver.cycle(&mut v, forcing.as_ref())?;
        after_cycle(&solver, &v, forcing.as_ref())?;
    }
    Ok(v.reversed())
}

/// Loss, predictions and gradients for one batch.
///
/// Serial mode is exact BPTT. MGRIT mode follows the parallel training
/// algorithm: from `h = 0`, `fwd_iters` forward cycles; loss and terminal
/// cotangent from the resulting states; `bwd_iters` adjoint cycles; gradient
/// assembly from the fine-level tapes.
pub fn forward_backward<L: Lanes>(model: &Model, batch: &Batch, mode: &PropagationMode, lanes: &L) -> Result<BatchOutcome> {
    check_batch(model, batch)?;
    let cf = match mode {
        PropagationMode::Serial => 1,
        PropagationMode::Mgrit(c) => c.cf,
    };
    let fwd = GruForward::new(&model.stack, model.kind, batch.size(), &batch.inputs, model.dt, cf)?;
    let steps = fwd.steps();

    let (h, tapes, fwd_residual) = match mode {
        PropagationMode::Serial => {
            let (h, tapes) = serial_forward(&fwd);
            (h, tapes, None)
        }
        PropagationMode::Mgrit(_) => {
            let h = forward_states(&fwd, mode, lanes)?;
            let (tapes, r) = record_tapes(lanes, &fwd, &h)?;
            (h, tapes, Some(r))
        }
    };

    let LossTerms { loss, correct, predictions, head_grad, source } = loss_terms(model, batch, &h)?;

    let (stack_grad, bwd_residual) = match mode {
        PropagationMode::Serial => (serial_backward(&model.stack, &tapes, &source).1, None),
        PropagationMode::Mgrit(config) => {
            let hierarchy = hierarchy_for(steps, config)?;
            let interior = batch.lengths.iter().any(|&l| l < steps);
            let src = interior.then_some(&source);
            let adjoint = GruAdjoint::new(lanes, &fwd, &hierarchy.step_counts(), tapes, &h)?;
            let w = adjoint_cycles(&adjoint, &hierarchy, config, lanes, &source, interior, |_, _, _| Ok(()))?;
            let (g, r) = assemble_gradient(lanes, &model.stack, cf, adjoint.fine_tapes(), &w, src)?;
            (g, Some(r))
        }
    };

    Ok(BatchOutcome {
        loss,
        correct,
        predictions,
        grad: ModelGrad { stack: stack_grad, head: head_grad },
        fwd_residual,
        bwd_residual,
    })
}

/// Forward and adjoint residual norms per MGRIT iteration on one batch.
///
/// The forward curve starts from `h = 0`; the adjoint curve is linearized
/// about the exact serial states so both curves isolate solver convergence.
/// `fwd_iters` and `bwd_iters` in `config` set the curve lengths.
pub fn convergence_study<L: Lanes>(model: &Model, batch: &Batch, config: &CycleConfig, lanes: &L) -> Result<ConvergenceReport> {
    check_batch(model, batch)?;
    let fwd = GruForward::new(&model.stack, model.kind, batch.size(), &batch.inputs, model.dt, config.cf)?;
    let steps = fwd.steps();
    let hierarchy = hierarchy_for(steps, config)?;
    let mut report = ConvergenceReport::new(hierarchy.num_levels());

    let mut h = Sequence::zeros(steps, fwd.state_dim());
    let solver = Mgrit::new(&fwd, &hierarchy, config.fine_relax, lanes);
    for _ in 0..config.fwd_iters {
        let start = Instant::now();
        solver.cycle(&mut h, None)?;
        report.forward_seconds.push(start.elapsed().as_secs_f64());
        report.forward.push(solver.residual_norm(&h, None)?);
    }

    let (exact, tapes) = serial_forward(&fwd);
    let terms = loss_terms(model, batch, &exact)?;
    let interior = batch.lengths.iter().any(|&l| l < steps);
    let adjoint = GruAdjoint::new(lanes, &fwd, &hierarchy.step_counts(), tapes, &exact)?;
    let mut start = Instant::now();
    adjoint_cycles(&adjoint, &hierarchy, config, lanes, &terms.source, interior, |solver, v, forcing| {
        report.backward_seconds.push(start.elapsed().as_secs_f64());
        report.backward.push(solver.residual_norm(v, forcing)?);
        start = Instant::now();
        Ok(())
    })?;
    report.level_seconds = solver.level_seconds();
    Ok(report)
}

/// Exact loss and gradient of one batch by backpropagation through time.
pub fn serial_bptt(model: &Model, batch: &Batch) -> Result<BatchOutcome> {
    forward_backward(model, batch, &PropagationMode::Serial, &crate::mgrit::SingleLane)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: DenseVector,
}

/// Class predictions for a batch; MGRIT mode runs `fwd_iters` cycles from `h = 0`.
pub fn infer<L: Lanes>(model: &Model, batch: &Batch, mode: &PropagationMode, lanes: &L) -> Result<Vec<Prediction>> {
    check_batch(model, batch)?;
    let cf = match mode {
        PropagationMode::Serial => 1,
        PropagationMode::Mgrit(c) => c.cf,
    };
    let fwd = GruForward::new(&model.stack, model.kind, batch.size(), &batch.inputs, model.dt, cf)?;
    let h = forward_states(&fwd, mode, lanes)?;
    Ok((0..batch.size())
        .map(|b| {
            let logits = model.head.logits(&h[batch.lengths[b]][top_block(&model.stack, batch.size(), b)]);
            Prediction { label: argmax(&logits), logits }
        })
        .collect())
}

/// Predicted labels for a whole set, evaluated in batches of `batch_size`.
pub fn predict<L: Lanes>(model: &Model, set: &LabeledSequenceSet, mode: &PropagationMode, lanes: &L, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(infer(model, &set.batch(chunk), mode, lanes)?.into_iter().map(|p| p.label));
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], set: &LabeledSequenceSet) -> f64 {
    let correct = predictions.iter().zip(&set.sequences).filter(|(p, s)| **p == s.label).count();
    correct as f64 / set.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Halve the rate every 5 epochs, never going below 1.25e-4.
    pub schedule: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 100,
            epochs: 20,
            schedule: false,
            seed: 0,
        }
    }
}

pub const LR_FLOOR: f64 = 1.25e-4;

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if !self.schedule {
            return self.lr;
        }
        let halved = self.lr * 0.5f64.powi((epoch / 5) as i32);
        halved.max(LR_FLOOR.min(self.lr))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("learning rate, batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub fwd_residual: Option<f64>,
    pub bwd_residual: Option<f64>,
    pub wall_seconds: f64,
}

/// Trains `model` in place; `on_epoch` sees every epoch's metrics as soon
/// as they are available.
pub fn train<L: Lanes>(
    model: &mut Model,
    train_set: &LabeledSequenceSet,
    test_set: Option<&LabeledSequenceSet>,
    config: &TrainConfig,
    mode: &PropagationMode,
    lanes: &L,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train_set.feature_dim != model.stack.input_dim() {
        return Err(Error::shape("training features", model.stack.input_dim(), train_set.feature_dim));
    }
    if let PropagationMode::Mgrit(c) = mode {
        hierarchy_for(train_set.steps(), c)?;
    }
    let mut adam = AdamState::for_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let (mut fwd_sum, mut bwd_sum, mut batches) = (0.0, 0.0, 0usize);
        for (i, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.batch(chunk);
            let out = forward_backward(model, &batch, mode, lanes)?;
            if !out.loss.is_finite() || !out.grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged in epoch {} batch {i}: loss {}, largest gradient entry {}",
                    epoch + 1,
                    out.loss,
                    out.grad.max_abs()
                )));
            }
            adam_step(&mut adam, model.parameters_mut(), &out.grad.tensors(), lr)?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            fwd_sum += out.fwd_residual.unwrap_or(0.0);
            bwd_sum += out.bwd_residual.unwrap_or(0.0);
            batches += 1;
        }
        let test_accuracy = match test_set {
            Some(t) if !t.is_empty() => Some(accuracy(&predict(model, t, mode, lanes, config.batch_size)?, t)),
            _ => None,
        };
        let is_mgrit = matches!(mode, PropagationMode::Mgrit(_));
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
            fwd_residual: is_mgrit.then(|| fwd_sum / batches as f64),
            bwd_residual: is_mgrit.then(|| bwd_sum / batches as f64),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::mgrit::SingleLane;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector(x.to_vec())
    }

    #[test]
    fn loss_examples() {
        let head = ClassifierHead::zeros(3, 6);
        let out = loss_and_terminal_cotangent(&head, &v(&[0.3, -1.0, 2.0]), 2).unwrap();
        assert!((out.loss - 6f64.ln()).abs() < 1e-15);
        assert!((out.loss - 1.791759).abs() < 1e-6);

        let mut head = ClassifierHead::zeros(1, 6);
        head.bias[4] = 30.0;
        let out = loss_and_terminal_cotangent(&head, &v(&[0.7]), 4).unwrap();
        assert!(out.loss <= 1e-12);
        assert!(out.w_t.max_abs() < 1e-12);

        let mut head = ClassifierHead::zeros(1, 2);
        head.weights = DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let out = loss_and_terminal_cotangent(&head, &v(&[1.0]), 0).unwrap();
        let oracle = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - oracle).abs() < 1e-15);
        assert!((out.loss - 0.313262).abs() < 1e-6);

        assert!(loss_and_terminal_cotangent(&head, &v(&[1.0]), 2).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ClassifierHead::init(4, 5, &mut rng);
        let h = v(&[0.3, -0.8, 0.5, 1.1]);
        let out = loss_and_terminal_cotangent(&head, &h, 3).unwrap();
        let eps = 1e-6;
        for j in 0..4 {
            let (mut up, mut dn) = (h.clone(), h.clone());
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss_and_terminal_cotangent(&head, &up, 3).unwrap().loss
                - loss_and_terminal_cotangent(&head, &dn, 3).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - out.w_t[j]).abs() < 1e-8);
        }
        for k in 0..head.weights.as_slice().len() {
            let (mut up, mut dn) = (head.clone(), head.clone());
            up.weights.as_mut_slice()[k] += eps;
            dn.weights.as_mut_slice()[k] -= eps;
            let fd = (loss_and_terminal_cotangent(&up, &h, 3).unwrap().loss
                - loss_and_terminal_cotangent(&dn, &h, 3).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - out.head_grad.weights.as_slice()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut st, vec![&mut p], &[&[0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // first step moves each component by lr·g/(|g| + ε) after bias correction
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut st, vec![&mut p], &[&[0.5, -3.0]], 1e-3).unwrap();
        assert!((p[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);

        // two identical steps against a scalar hand computation
        let (g, lr) = (0.2, 0.01);
        let mut x = vec![0.5];
        let mut st = AdamState::new(&[1]);
        adam_step(&mut st, vec![&mut x], &[&[g]], lr).unwrap();
        adam_step(&mut st, vec![&mut x], &[&[g]], lr).unwrap();
        let (mut m, mut s, mut want) = (0.0, 0.0, 0.5);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            s = 0.999 * s + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = s / (1.0 - 0.999f64.powi(t));
            want -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((x[0] - want).abs() < 1e-12);

        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut AdamState::new(&[2]), vec![&mut p], &[&[0.0; 3]], 1e-3).is_err());
    }

    #[test]
    fn schedule_halves_and_floors() {
        let c = TrainConfig { schedule: true, ..TrainConfig::default() };
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(5), 5e-4);
        assert_eq!(c.learning_rate(10), 2.5e-4);
        assert_eq!(c.learning_rate(15), 1.25e-4);
        for e in 0..200 {
            assert!(c.learning_rate(e) >= LR_FLOOR);
        }
        assert_eq!(TrainConfig::default().learning_rate(12), 1e-3);
    }

    fn tiny_set(steps: usize, seed: u64) -> LabeledSequenceSet {
        let mut spec = SynthSpec::new(3, steps, 2, 2, seed);
        spec.noise = 0.3;
        synth_generate(&spec).unwrap()
    }

    fn bptt_fd_check(kind: CellKind) {
        let set = tiny_set(16, 1);
        let model = Model::init(2, 2, 4, 3, kind, 2);
        let batch = set.batch(&[0, 1, 2, 3]);
        let out = serial_bptt(&model, &batch).unwrap();
        let eps = 1e-6;
        let loss_of = |m: &Model| serial_bptt(m, &batch).unwrap().loss;
        let grads: Vec<Vec<f64>> = out.grad.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in grads.iter().enumerate() {
            for k in (0..g.len()).step_by(3) {
                let mut up = model.clone();
                up.parameters_mut()[ti][k] += eps;
                let mut dn = model.clone();
                dn.parameters_mut()[ti][k] -= eps;
                let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4);
                assert!(err <= 1e-4, "{kind:?} tensor {ti}[{k}]: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn serial_bptt_matches_finite_differences() {
        bptt_fd_check(CellKind::Implicit);
        bptt_fd_check(CellKind::Classic);
    }

    #[test]
    fn zero_head_gives_zero_recurrent_gradient() {
        let set = tiny_set(16, 2);
        let mut model = Model::init(2, 2, 4, 3, CellKind::Implicit, 3);
        model.head = ClassifierHead::zeros(4, 3);
        let out = serial_bptt(&model, &set.batch(&[0, 1])).unwrap();
        assert_eq!(out.grad.stack.max_abs(), 0.0);
    }

    #[test]
    fn converged_mgrit_gradient_matches_bptt() {
        let set = tiny_set(32, 4);
        let model = Model::init(2, 2, 4, 3, CellKind::Implicit, 5);
        let batch = set.batch(&[0, 1, 2]);
        let serial = serial_bptt(&model, &batch).unwrap();
        let config = CycleConfig { fwd_iters: 30, bwd_iters: 30, ..CycleConfig::default() };
        let out = forward_backward(&model, &batch, &PropagationMode::Mgrit(config), &SingleLane).unwrap();
        assert!((out.loss - serial.loss).abs() < 1e-12);
        assert!(out.grad.max_abs_diff(&serial.grad) < 1e-10);
        assert!(out.fwd_residual.unwrap() < 1e-12);
    }

    #[test]
    fn padded_samples_read_their_own_last_index() {
        let mut set = tiny_set(13, 6);
        set.sequences[1].features.truncate(9);
        set.sequences[1].length = 9;
        set.pad_to_multiple(16);
        assert_eq!(set.steps(), 16);
        let model = Model::init(1, 2, 4, 3, CellKind::Implicit, 7);
        let batch = set.batch(&[0, 1]);
        let serial = serial_bptt(&model, &batch).unwrap();
        let config = CycleConfig { fwd_iters: 30, bwd_iters: 30, levels: 2, ..CycleConfig::default() };
        let out = forward_backward(&model, &batch, &PropagationMode::Mgrit(config), &SingleLane).unwrap();
        assert!(out.grad.max_abs_diff(&serial.grad) < 1e-10);

        // the padded tail cannot influence the loss
        let mut moved = batch.clone();
        for t in 10..=16 {
            moved.inputs[t][2..4].copy_from_slice(&[5.0, -5.0]);
        }
        assert_eq!(serial_bptt(&model, &moved).unwrap().loss, serial.loss);
    }

    #[test]
    fn zero_model_predicts_uniform_logits_in_both_modes() {
        let set = tiny_set(16, 8);
        let mut model = Model::init(2, 2, 4, 3, CellKind::Implicit, 9);
        model.stack = GruStack::zeros(2, 2, 4);
        model.head = ClassifierHead::zeros(4, 3);
        let batch = set.batch(&[0, 1, 2]);
        let config = CycleConfig { levels: 2, ..CycleConfig::default() };
        for mode in [PropagationMode::Serial, PropagationMode::Mgrit(config)] {
            for p in infer(&model, &batch, &mode, &SingleLane).unwrap() {
                assert!(p.logits.iter().all(|&l| l == 0.0));
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_reduces_the_loss() {
        let set = tiny_set(16, 10);
        let config = TrainConfig { lr: 1e-2, batch_size: 3, epochs: 4, schedule: false, seed: 1 };
        let cycle = CycleConfig { levels: 2, ..CycleConfig::default() };
        let run = || {
            let mut model = Model::init(1, 2, 6, 3, CellKind::Implicit, 11);
            train(&mut model, &set, Some(&set), &config, &PropagationMode::Mgrit(cycle.clone()), &SingleLane, |_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        let losses = |h: &[EpochMetrics]| h.iter().map(|m| m.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.last().unwrap().train_loss < a[0].train_loss);
        assert!(a.iter().all(|m| m.fwd_residual.is_some() && m.test_accuracy.is_some()));
    }

    #[test]
    fn convergence_curves_decrease_for_each_coarsening_factor() {
        let set = tiny_set(128, 14);
        let model = Model::init(2, 2, 8, 3, CellKind::Implicit, 15);
        let batch = set.batch(&[0, 1, 2]);
        for (cf, depth) in [(2, 6), (4, 3), (8, 2)] {
            let config = CycleConfig { cf, levels: 10, fwd_iters: 6, bwd_iters: 6, ..CycleConfig::default() };
            let r = convergence_study(&model, &batch, &config, &SingleLane).unwrap();
            assert_eq!(r.levels, depth);
            for curve in [&r.forward, &r.backward] {
                assert_eq!(curve.len(), 6);
                for w in curve.windows(2) {
                    assert!(w[1] < w[0] || w[1] < 1e-13, "cf {cf}: {curve:?}");
                }
            }
        }
    }

    #[test]
    fn converged_mgrit_training_tracks_serial_training() {
        let set = tiny_set(16, 16);
        let config = TrainConfig { lr: 1e-2, batch_size: 4, epochs: 3, schedule: false, seed: 2 };
        let cycle = CycleConfig { levels: 2, fwd_iters: 25, bwd_iters: 25, ..CycleConfig::default() };
        let mut serial = Model::init(2, 2, 5, 3, CellKind::Implicit, 17);
        let mut parallel = serial.clone();
        let a = train(&mut serial, &set, None, &config, &PropagationMode::Serial, &SingleLane, |_| Ok(())).unwrap();
        let b = train(&mut parallel, &set, None, &config, &PropagationMode::Mgrit(cycle), &SingleLane, |_| Ok(())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.train_loss - y.train_loss).abs() < 1e-10);
        }
        let diff = serial
            .parameters_mut()
            .into_iter()
            .zip(parallel.parameters_mut())
            .flat_map(|(p, q)| p.iter().zip(q.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn divergence_is_reported() {
        let set = tiny_set(16, 12);
        let mut model = Model::init(1, 2, 4, 3, CellKind::Implicit, 13);
        model.head.bias[0] = f64::NAN;
        let r = train(&mut model, &set, None, &TrainConfig::default(), &PropagationMode::Serial, &SingleLane, |_| Ok(()));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
