//! Loss, optimizer, metrics and the training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::bptt::{backward, GradSet};
use crate::cells::{Activation, Network};
use crate::data::{Dataset, SpikeSequence};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdaBelief,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::AdaBelief => "adabelief",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adabelief" => Ok(OptimizerKind::AdaBelief),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Parameter(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Decoupled weight decay rate `λ`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Average the weights over the final quarter of the epochs.
    pub tail_average: bool,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            weight_decay: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            tail_average: false,
            optimizer: OptimizerKind::AdaBelief,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-16,
            activation: Activation::Hard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Parameter(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Parameter(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Parameter("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy averaged over time steps, with its gradient
/// w.r.t. the logits.
pub fn smoothed_xent(logits: &Matrix, target: usize, smoothing: f64) -> Result<(f64, Matrix)> {
    let (steps, n) = logits.shape();
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {n}")));
    }
    if target >= n {
        return Err(Error::Parameter(format!("target {target} out of range for {n} classes")));
    }
    if steps == 0 {
        return Err(Error::Shape("empty logit sequence".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let q_other = smoothing / n as f64;
    let q_target = 1.0 - smoothing + q_other;
    let mut grad = Matrix::zeros(steps, n);
    let mut loss = 0.0;
    for t in 0..steps {
        let row = logits.row(t);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - top).exp()).sum();
        let lse = top + sum.ln();
        let g = grad.row_mut(t);
        for (k, &l) in row.iter().enumerate() {
            let q = if k == target { q_target } else { q_other };
            loss -= q * (l - lse);
            g[k] = ((l - lse).exp() - q) / steps as f64;
        }
    }
    Ok((loss / steps as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeResult {
    pub predicted: usize,
    pub correct: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Class predicted most often across time steps; ties go to the longest
/// consecutive run, then the lowest index.
pub fn mode_prediction(per_step: &[usize], n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    let mut runs = vec![0usize; n_classes];
    let mut run = 0;
    for (t, &p) in per_step.iter().enumerate() {
        counts[p] += 1;
        run = if t > 0 && per_step[t - 1] == p { run + 1 } else { 1 };
        runs[p] = runs[p].max(run);
    }
    (0..n_classes)
        .max_by(|&a, &b| (counts[a], runs[a]).cmp(&(counts[b], runs[b])).then(b.cmp(&a)))
        .unwrap_or(0)
}

pub fn mode_accuracy(logits: &Matrix, target: usize) -> ModeResult {
    let preds: Vec<usize> = (0..logits.rows()).map(|t| argmax(logits.row(t))).collect();
    let predicted = mode_prediction(&preds, logits.cols());
    ModeResult { predicted, correct: predicted == target }
}

/// Mutable views of every parameter block, in [`GradSet::flatten`] order,
/// with a display name.
fn param_blocks(net: &mut Network) -> Vec<(String, &mut [f64])> {
    let mut blocks = Vec::new();
    for (l, layer) in net.layers.iter_mut().enumerate() {
        blocks.push((format!("layer{l}.w_in"), layer.w.w_in.as_mut_slice()));
        blocks.push((format!("layer{l}.w_rec"), layer.w.w_rec.as_mut_slice()));
        blocks.push((format!("layer{l}.bias"), layer.w.bias.as_mut_slice()));
    }
    blocks.push(("readout.w".into(), net.readout.w.as_mut_slice()));
    blocks.push(("readout.bias".into(), net.readout.bias.as_mut_slice()));
    blocks
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState { step: 0, m: vec![0.0; n_params], s: vec![0.0; n_params] }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(GradSet::zeros_like(net).flatten().len())
    }
}

/// Scale `g` in place so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    norm
}

/// One optimizer update: global-norm clipping, moment updates with bias
/// correction, decoupled decay `w ← w − lr·λ·w`, then the adaptive step.
/// Recurrent diagonals are re-masked afterwards.
pub fn optimizer_step(net: &mut Network, grads: &GradSet, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    let mut g = grads.flatten();
    if g.len() != state.m.len() {
        return Err(Error::Shape(format!("{} gradients for {} optimizer slots", g.len(), state.m.len())));
    }
    clip_global_norm(&mut g, cfg.clip_norm);
    state.step += 1;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = cfg.lr * cfg.weight_decay;
    let mut k = 0;
    for (name, block) in param_blocks(net) {
        for w in block.iter_mut() {
            let gi = g[k];
            let m = b1 * state.m[k] + (1.0 - b1) * gi;
            let s = match cfg.optimizer {
                OptimizerKind::AdaBelief => b2 * state.s[k] + (1.0 - b2) * (gi - m) * (gi - m) + eps,
                OptimizerKind::Adam => b2 * state.s[k] + (1.0 - b2) * gi * gi,
            };
            state.m[k] = m;
            state.s[k] = s;
            let update = cfg.lr * (m / c1) / ((s / c2).sqrt() + eps);
            let next = *w - decay * *w - update;
            if !next.is_finite() {
                return Err(Error::Numeric(format!("non-finite update in {name}")));
            }
            *w = next;
            k += 1;
        }
    }
    net.mask_recurrent_diagonals();
    Ok(())
}

/// Loss and gradient for one labelled sequence.
pub fn sample_loss_grad(net: &Network, seq: &SpikeSequence, cfg: &TrainConfig) -> Result<(f64, GradSet)> {
    let tape = net.forward(&seq.to_dense(), cfg.activation)?;
    let (loss, dlogits) = smoothed_xent(&tape.logits, seq.label, cfg.label_smoothing)?;
    let grads = backward(&tape, &dlogits, net)?;
    Ok((loss, grads))
}

/// Mean loss and mode accuracy over a dataset.
pub fn evaluate(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for seq in &data.samples {
        let tape = net.forward(&seq.to_dense(), cfg.activation)?;
        loss += smoothed_xent(&tape.logits, seq.label, cfg.label_smoothing)?.0;
        correct += usize::from(mode_accuracy(&tape.logits, seq.label).correct);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mode_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// CSV `epoch,train_loss,val_loss,val_mode_acc` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_loss,val_mode_acc")?;
        for r in &self.epochs {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.epoch, r.train_loss, r.val_loss, r.val_mode_acc)?;
        }
        Ok(())
    }
}

fn flat_weights(net: &Network) -> Vec<f64> {
    crate::bptt::flatten_params(net)
}

fn load_weights(net: &mut Network, values: &[f64]) {
    let mut k = 0;
    for (_, block) in param_blocks(net) {
        for w in block.iter_mut() {
            *w = values[k];
            k += 1;
        }
    }
}

/// Train `net` on `train`, tracking validation loss and mode accuracy after
/// every epoch. With `tail_average`, the weights are averaged over the final
/// quarter of the epochs, the averaged weights are kept, and the last
/// history entry's validation metrics are computed with them.
pub fn fit(net: &mut Network, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    net.validate()?;
    let classes = train.n_classes().max(val.n_classes());
    if classes > net.n_out() {
        return Err(Error::Shape(format!("{classes} classes but the readout has {} outputs", net.n_out())));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let root = Rng::new(cfg.seed).substream("fit");
    let mut state = OptimizerState::for_network(net);
    let tail_start = cfg.epochs - cfg.epochs.div_ceil(4);
    let mut tail_sum: Option<Vec<f64>> = None;
    let mut tail_count = 0usize;

    for epoch in 0..cfg.epochs {
        let diverged = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("divergence at epoch {epoch}: {m}")),
            other => other,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.substream_index(epoch as u64).shuffle(&mut order);
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradSet::zeros_like(net);
            for &i in batch {
                let (loss, g) = sample_loss_grad(net, &train.samples[i], cfg).map_err(diverged)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("divergence at epoch {epoch}: loss {loss}")));
                }
                total_loss += loss;
                acc.add_assign(&g)?;
            }
            acc.scale(1.0 / batch.len() as f64);
            optimizer_step(net, &acc, &mut state, cfg).map_err(diverged)?;
        }
        if epoch >= tail_start && cfg.tail_average {
            let w = flat_weights(net);
            match tail_sum.as_mut() {
                None => tail_sum = Some(w),
                Some(sum) => sum.iter_mut().zip(&w).for_each(|(s, v)| *s += v),
            }
            tail_count += 1;
        }
        if epoch + 1 == cfg.epochs {
            if let Some(sum) = &tail_sum {
                let avg: Vec<f64> = sum.iter().map(|s| s / tail_count as f64).collect();
                load_weights(net, &avg);
                net.mask_recurrent_diagonals();
            }
        }
        let (val_loss, val_mode_acc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(net, val, cfg).map_err(diverged)?
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total_loss / train.len() as f64,
            val_loss,
            val_mode_acc,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {val_loss:.4}, val mode acc {val_mode_acc:.4}",
            total_loss / train.len() as f64
        );
    }
    Ok(history)
}
