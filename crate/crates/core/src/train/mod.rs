//! Two-phase trainer: Adam with linear learning-rate decay, EMA bound
//! calibration that freezes when quantization turns on, optional
//! distillation targets and averaged evaluation over zero-LR checkpoints.

mod data;
mod toy;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Mode, Model, NnError, Phase, Tensor};

pub use data::{read_teacher_csv, validate_distribution, Dataset, SyntheticSpec};
pub use toy::{ToyConfig, ToyModelSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {step} outside 0..={total}")]
    StepRange { step: usize, total: usize },
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("teacher probabilities: {0}")]
    Teacher(String),
    #[error("no checkpoints to evaluate")]
    NoCheckpoints,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Step at which every quantizer turns on and activation bounds freeze.
    /// `None` means `total_steps * 50 / 750`.
    pub phase_switch_step: Option<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub bn_momentum: f64,
    /// Gradient bound `B` of the binary activation quantizer.
    pub binary_act_bound: f64,
    /// Fixed gradient bound for binary weights; `None` uses per-channel `max |w|`.
    pub binary_weight_bound: Option<f64>,
    /// Apply weight decay to DPReLU parameters too.
    pub decay_dprelu: bool,
    pub seed: u64,
    pub batch_size: usize,
    /// CSV of per-example teacher probabilities replacing one-hot labels.
    pub distill: Option<PathBuf>,
    /// Steps run after `total_steps` with zero learning rate (BatchNorm statistics keep updating).
    pub tail_steps: usize,
    /// Snapshots taken evenly across the zero-LR tail.
    pub tail_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 750,
            phase_switch_step: None,
            base_lr: 6.4e-4,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            adam_epsilon: 1e-8,
            bn_momentum: 0.9,
            binary_act_bound: 3.0,
            binary_weight_bound: None,
            decay_dprelu: false,
            seed: 0,
            batch_size: 32,
            distill: None,
            tail_steps: 0,
            tail_checkpoints: 0,
        }
    }
}

impl TrainConfig {
    pub fn switch_step(&self) -> usize {
        self.phase_switch_step.unwrap_or(self.total_steps * 50 / 750)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let s = self.switch_step();
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 || s == 0 || s >= self.total_steps {
            return bad(format!("need 0 < phase_switch_step ({s}) < total_steps ({})", self.total_steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.binary_act_bound > 0.0) {
            return bad("binary activation bound must be positive".into());
        }
        if self.tail_checkpoints > self.tail_steps.max(1) || (self.tail_checkpoints == 0) != (self.tail_steps == 0) {
            return bad("tail_checkpoints must be in 1..=tail_steps when a tail is requested".into());
        }
        Ok(())
    }

    /// Quantizer phase in effect at `step`.
    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.switch_step() {
            Phase::One
        } else {
            Phase::Two
        }
    }
}

/// `base_lr · (1 − step / total_steps)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::StepRange {
            step,
            total: cfg.total_steps,
        });
    }
    Ok(cfg.base_lr * (1.0 - step as f64 / cfg.total_steps as f64))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update with decoupled weight decay on parameters where `decay(name)` holds.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
    decay: &dyn Fn(&str) -> bool,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        match params.get(name) {
            Some(p) if p.shape == g.shape => {}
            _ => return Err(TrainError::Config(format!("gradient `{name}` matches no parameter"))),
        }
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let wd = if decay(name) { cfg.weight_decay } else { 0.0 };
        for i in 0..g.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_epsilon);
            p.data[i] -= lr * (step + wd * p.data[i]);
        }
    }
    Ok(())
}

/// Mean over the batch of `KL(teacher ‖ softmax(student))`.
pub fn kl_distill_loss(student_logits: &Tensor, teacher_probs: &Tensor) -> Result<f64, TrainError> {
    validate_distribution(teacher_probs)?;
    let mut tape = crate::nn::Tape::new();
    let s = tape.constant(student_logits.clone());
    let l = tape.kl_loss(s, teacher_probs)?;
    Ok(tape.value(l).data[0])
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .data
        .chunks_exact(logits.channels())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn top1(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 in eval mode with the given phase, in batches.
pub fn evaluate(model: &mut Model, data: &Dataset, phase: Phase, batch: usize) -> Result<f64, TrainError> {
    let mut hits = 0.0;
    let mut lo = 0;
    while lo < data.len() {
        let hi = (lo + batch.max(1)).min(data.len());
        let pass = model.forward(&data.images.slice_batch(lo, hi), Mode::Eval, phase)?;
        hits += top1(pass.logits(), &data.labels[lo..hi]) * (hi - lo) as f64;
        lo = hi;
    }
    Ok(hits / data.len() as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub phase: u8,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricRecord>,
    /// Steps at which activation bounds were frozen.
    pub freeze_steps: Vec<usize>,
    /// Eval-mode, fully quantized top-1 on the training set after the last step.
    pub final_top1: f64,
    /// State dictionaries captured across the zero-LR tail.
    pub tail_checkpoints: Vec<BTreeMap<String, Tensor>>,
}

impl TrainSummary {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Deterministic minibatch order: a fresh permutation per epoch.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batches {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        b.order.shuffle(&mut b.rng);
        b.pos = 0;
        b
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `model` in place. Metrics are written as one JSON object per line to `log`.
pub fn train_loop(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    model.config.binary_act_bound = cfg.binary_act_bound;
    model.config.binary_weight_bound = cfg.binary_weight_bound;
    model.config.bn_momentum = cfg.bn_momentum;
    if model.classes() != data.classes {
        return Err(TrainError::Config(format!(
            "model has {} classes, dataset {}",
            model.classes(),
            data.classes
        )));
    }
    let targets = match &cfg.distill {
        Some(path) => read_teacher_csv(path, data.len(), data.classes)?,
        None => data.one_hot(),
    };
    let decay_dprelu = cfg.decay_dprelu;
    let decay = move |name: &str| {
        Model::is_weight(name)
            || (decay_dprelu && [".alpha", ".beta", ".gamma", ".eta"].iter().any(|s| name.ends_with(s)))
    };
    let mut batches = Batches::new(data.len(), cfg.seed);
    let mut adam = AdamState::default();
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut freeze_steps = Vec::new();
    let mut tail_checkpoints = Vec::new();
    let end = cfg.total_steps + cfg.tail_steps;
    for step in 0..end {
        let phase = cfg.phase_at(step);
        if step == cfg.switch_step() && model.freeze_bounds() > 0 {
            freeze_steps.push(step);
        }
        let lr = if step < cfg.total_steps { lr_at(step, cfg)? } else { 0.0 };
        let idx = batches.next(cfg.batch_size);
        let x = data.images.gather_batch(&idx);
        let t = targets.gather_batch(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut pass = model.forward(&x, Mode::Train, phase)?;
        let loss_var = pass.tape.kl_loss(pass.logits, &t)?;
        let loss = pass.tape.value(loss_var).data[0];
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let acc = top1(pass.logits(), &labels);
        if lr > 0.0 {
            let grads = model.backward(&pass, loss_var)?;
            adam_step(model.params_mut(), &grads, &mut adam, lr, cfg, &decay)?;
        }
        let rec = MetricRecord {
            step,
            lr,
            loss,
            top1: acc,
            phase: if phase == Phase::One { 1 } else { 2 },
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        records.push(rec);
        if step >= cfg.total_steps {
            let k = step - cfg.total_steps + 1;
            // Evenly spaced snapshots ending at the last tail step.
            if k * cfg.tail_checkpoints % cfg.tail_steps < cfg.tail_checkpoints {
                tail_checkpoints.push(model.state_dict());
            }
        }
    }
    let final_top1 = evaluate(model, data, Phase::Two, 64)?;
    Ok(TrainSummary {
        records,
        freeze_steps,
        final_top1,
        tail_checkpoints,
    })
}

/// Mean eval-mode top-1 over the given state dictionaries.
pub fn eval_averaged_top1(
    model: &Model,
    data: &Dataset,
    checkpoints: &[BTreeMap<String, Tensor>],
) -> Result<f64, TrainError> {
    if checkpoints.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let mut total = 0.0;
    for ck in checkpoints {
        let mut m = model.clone();
        m.load_state_dict(ck.clone())?;
        total += evaluate(&mut m, data, Phase::Two, 64)?;
    }
    Ok(total / checkpoints.len() as f64)
}
