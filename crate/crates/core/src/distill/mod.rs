//! Knowledge-distillation training: loss terms, reverse-mode gradients,
//! mini-batch SGD and the one- and two-stage distillation procedures.

mod backprop;
mod loss;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backprop::{backprop_grads, check_trainable, is_trainable, Grads};
pub use loss::{
    compound_loss, embedding_grad, logit_grad, loss_terms, LossTerms, LossWeights, Strategy, Target, LOG_FLOOR,
};

pub use crate::data::{synth_dataset, Dataset, Example, SynthConfig};
use crate::error::{Error, Result};
use crate::exec::forward;
use crate::model::{Model, ModelArch};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Upper bound on the L2 norm of each layer's mean batch gradient.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.02, epochs: 30, batch_size: 16, seed: 0, patience: 5, clip_norm: Some(1.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::InvalidArgument(format!("clip norm {:?}", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean compound loss per example over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub weights: LossWeights,
    pub curve: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub final_loss: f64,
    pub stopped_early: bool,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in curve {
        let _ = writeln!(s, "{},{:.6},{},{}", r.epoch, r.train_loss, opt(r.val_loss), opt(r.val_accuracy));
    }
    s
}

/// Result of one distillation run: the student and one report per stage.
#[derive(Clone, Debug)]
pub struct Distilled<T> {
    pub student: Model<T>,
    pub stages: Vec<TrainReport>,
}

#[derive(Clone, Debug)]
pub struct TwoStage<T> {
    pub intermediate: Distilled<T>,
    pub student: Distilled<T>,
}

struct Batch<T> {
    inputs: Vec<Tensor<T>>,
    targets: Vec<Target>,
}

fn single_patch<T: Real>(ex: &Example) -> Result<Tensor<T>> {
    match ex.patches.as_slice() {
        [p] => Ok(p.cast()),
        other => Err(Error::Unsupported(format!("training takes single-patch clips, got {}", other.len()))),
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Inputs plus hard, soft and embedding targets. The teacher runs once
/// per example.
fn prepare<T: Real>(examples: &[Example], teacher: Option<&Model<T>>) -> Result<Batch<T>> {
    let mut inputs = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        let x = single_patch::<T>(ex)?;
        let target = match teacher {
            Some(t) => {
                let tr = forward(t, std::slice::from_ref(&x))?;
                Target { label: ex.label, soft: Some(to_f64(&tr.class_probs)), embedding: tr.embedding().map(to_f64) }
            }
            None => Target::hard(ex.label),
        };
        inputs.push(x);
        targets.push(target);
    }
    Ok(Batch { inputs, targets })
}

/// Mean compound loss and accuracy of `model` on a prepared set.
fn evaluate<T: Real>(model: &Model<T>, set: &Batch<T>, w: LossWeights) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        let tr = forward(model, std::slice::from_ref(x))?;
        let emb = tr.embedding().map(to_f64);
        loss += compound_loss(&t.terms(&to_f64(&tr.class_probs), emb.as_deref(), w)?, w);
        correct += usize::from(tr.predicted() == t.label);
    }
    let n = set.inputs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Descends along `grads` scaled by `step`. With a clip bound, each layer's
/// step is shortened so its mean gradient has norm at most `clip`.
fn apply_update<T: Real>(
    model: &mut Model<T>,
    grads: &Grads<T>,
    step: f64,
    batch: usize,
    clip: Option<f64>,
    trainable: &[bool],
) {
    for ((p, g), &train) in model.weights.layers.iter_mut().zip(&grads.layers).zip(trainable) {
        if !train {
            continue;
        }
        let mut scale = step;
        if let Some(clip) = clip {
            let sq: f64 = g
                .tensors()
                .into_iter()
                .filter(|(name, _)| is_trainable(name))
                .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum();
            let norm = sq.sqrt() / batch as f64;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let scale = T::of(scale / batch as f64);
        for ((name, t), (_, gt)) in p.tensors_mut().into_iter().zip(g.tensors()) {
            if is_trainable(name) {
                for (v, &d) in t.data_mut().iter_mut().zip(gt.data()) {
                    *v -= scale * d;
                }
            }
        }
    }
}

fn train_prepared<T: Real>(
    model: &Model<T>,
    train: &Batch<T>,
    val: &Batch<T>,
    w: LossWeights,
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<(Model<T>, TrainReport)> {
    cfg.validate()?;
    w.validate()?;
    check_trainable(model)?;
    if train.inputs.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    let mut current = model.clone();
    let mut best = (current.clone(), f64::INFINITY, 0usize);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&Tensor<T>> = chunk.iter().map(|&i| &train.inputs[i]).collect();
            let targets: Vec<&Target> = chunk.iter().map(|&i| &train.targets[i]).collect();
            let (terms, grads) = backprop::backprop_masked(&current, &inputs, &targets, w, trainable)?;
            total += compound_loss(&terms, w);
            apply_update(&mut current, &grads, cfg.learning_rate, chunk.len(), cfg.clip_norm, trainable);
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
        }
        let (val_loss, val_accuracy) = if val.inputs.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&current, val, w)?;
            (Some(l), Some(a))
        };
        curve.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        let score = val_loss.unwrap_or(train_loss);
        if score < best.1 {
            best = (current.clone(), score, epoch);
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (model, final_loss, best_epoch) = if curve.is_empty() { (current, f64::NAN, 0) } else { best };
    Ok((model, TrainReport { weights: w, curve, best_epoch, final_loss, stopped_early }))
}

/// Mini-batch SGD on `data.train` with early stopping on `data.val`. The
/// returned model holds the weights of the best validation epoch.
pub fn sgd_train<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    teacher: Option<&Model<T>>,
    w: LossWeights,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainReport)> {
    if w.needs_teacher() && teacher.is_none() {
        return Err(Error::InvalidArgument("soft-label and embedding terms need a teacher".into()));
    }
    let train = prepare(&data.train, teacher)?;
    let val = prepare(&data.val, teacher)?;
    train_prepared(model, &train, &val, w, cfg, &vec![true; model.arch.layers.len()])
}

/// Trains a freshly initialized `student_arch` against a frozen teacher.
///
/// With embedding-only weights the student first learns to reproduce the
/// teacher embedding, then the layers after the tap are trained on hard
/// labels with everything up to the tap frozen.
pub fn distill<T: Real>(
    teacher: &Model<T>,
    student_arch: &ModelArch,
    data: &Dataset,
    w: LossWeights,
    cfg: &TrainConfig,
) -> Result<Distilled<T>> {
    w.validate()?;
    let student = Model::init(student_arch.clone(), cfg.seed)?;
    check_trainable(&student)?;
    if w.alpha_e > 0.0 {
        let dims = |m: &ModelArch| -> Result<usize> {
            let i = m
                .embedding_index()
                .ok_or_else(|| Error::InvalidArgument(format!("`{}` has no embedding tap", m.name)))?;
            Ok(crate::model::shape_trace(m)?[i].output_elements())
        };
        let (t, s) = (dims(&teacher.arch)?, dims(student_arch)?);
        if t != s {
            return Err(Error::Shape(format!("teacher embedding has {t} dims, student {s}")));
        }
    }
    let train = prepare(&data.train, Some(teacher))?;
    let val = prepare(&data.val, Some(teacher))?;
    let all = vec![true; student_arch.layers.len()];
    let (student, first) = train_prepared(&student, &train, &val, w, cfg, &all)?;
    if w.alpha_h > 0.0 || w.alpha_s > 0.0 {
        return Ok(Distilled { student, stages: vec![first] });
    }
    let tap = student_arch.embedding_index().expect("checked above");
    let head: Vec<bool> = (0..student_arch.layers.len()).map(|i| i > tap).collect();
    let hard = Strategy::Th.weights();
    let (student, second) = train_prepared(&student, &train, &val, hard, cfg, &head)?;
    Ok(Distilled { student, stages: vec![first, second] })
}

/// Distills `intermediate_arch` from the teacher, then `student_arch` from
/// the trained intermediate model, which stays frozen in the second stage.
pub fn two_stage_distill<T: Real>(
    teacher: &Model<T>,
    intermediate_arch: &ModelArch,
    student_arch: &ModelArch,
    data: &Dataset,
    w: LossWeights,
    cfg: &TrainConfig,
) -> Result<TwoStage<T>> {
    let intermediate = distill(teacher, intermediate_arch, data, w, cfg)?;
    let student = distill(&intermediate.student, student_arch, data, w, cfg)?;
    Ok(TwoStage { intermediate, student })
}

/// Top-1 accuracy of a float model over single- or multi-patch clips.
pub fn accuracy<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        let patches: Vec<Tensor<T>> = ex.patches.iter().map(Tensor::cast).collect();
        correct += usize::from(forward(model, &patches)?.predicted() == ex.label);
    }
    Ok(correct as f64 / examples.len() as f64)
}
