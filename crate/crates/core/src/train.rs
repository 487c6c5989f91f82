//! Per-modality training: BCE on logits, Adam, exponential learning-rate
//! decay, early stopping and best-validation checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{expand_training_set, AugmentError};
use crate::ensemble::Prediction;
use crate::metrics::roc_auc;
use crate::vit::{Checkpoint, CheckpointError, Mode, Real, Tensor, Vit3d, Vit3dConfig, Vit3dParams, VitError};
use crate::{Modality, Volume};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {count} training subjects, at least 2 are needed")]
    InsufficientData { class: u8, count: usize },
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("{volumes} volumes but {labels} labels")]
    LengthMismatch { volumes: usize, labels: usize },
    #[error("subject {0} appears twice")]
    DuplicateSubject(String),
    #[error("volume for {subject} is {found}, expected {expected}")]
    ModalityMismatch { subject: String, found: Modality, expected: Modality },
    #[error(transparent)]
    Model(#[from] VitError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    pub fn category(&self) -> &'static str {
        match self {
            TrainError::InvalidConfig(_) => "InvalidConfig",
            TrainError::InsufficientData { .. } => "InsufficientData",
            TrainError::NonFiniteGradient => "NonFiniteGradient",
            TrainError::LengthMismatch { .. } => "LengthMismatch",
            TrainError::DuplicateSubject(_) => "DuplicateSubject",
            TrainError::ModalityMismatch { .. } => "ModalityMismatch",
            TrainError::Model(e) => e.category(),
            TrainError::Augment(e) => e.category(),
            TrainError::Checkpoint(e) => e.category(),
        }
    }
}

/// Loss and `dL/dlogit` for one example, computed from the logit so that
/// saturated probabilities stay finite.
pub fn bce_with_logit(logit: f64, y: u8) -> (f64, f64) {
    let y = f64::from(y);
    // softplus(z) - y z
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - y * logit, crate::vit::sigmoid(logit) - y)
}

/// `-[y ln p + (1-y) ln(1-p)]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i].to_f64().unwrap_or(f64::NAN);
        let mi = cfg.beta1 * m[i].to_f64().unwrap_or(f64::NAN) + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].to_f64().unwrap_or(f64::NAN) + (1.0 - cfg.beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].to_f64().unwrap_or(f64::NAN) - update);
    }
}

/// Adam state: first and second moments shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vit3dParams<T>,
    pub v: Vit3dParams<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Vit3dParams<T>, config: AdamConfig) -> Self {
        Adam { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn step(&mut self, params: &mut Vit3dParams<T>, grads: &Vit3dParams<T>, lr: f64) -> Result<(), TrainError> {
        if !grads.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        self.step += 1;
        let grads: Vec<&Tensor<T>> = grads.named().into_iter().map(|(_, t)| t).collect();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads).zip(moments) {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, lr, &self.config);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub val_split: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub modality: Modality,
    /// Expand the training partition with the three quarter-turn rotations.
    pub augment: bool,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(modality: Modality, seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            val_split: 0.2,
            batch_size: 2,
            lr: 1e-4,
            lr_decay: 0.95,
            early_stop_patience: 3,
            seed,
            modality,
            augment: true,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return bad(format!("val_split {} must lie in (0, 1)", self.val_split));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("adam {a:?}"));
        }
        Ok(())
    }
}

/// Strict-improvement early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: None, since_improvement: 0 }
    }

    /// Ties and NaN count as no improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if self.best.is_none_or(|b| loss < b) && !loss.is_nan() {
            self.best = Some(loss);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            return Verdict::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when the validation partition holds one class only.
    pub val_auc: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_auc,lr\n");
    for r in rows {
        let auc = r.val_auc.map_or_else(String::new, |a| a.to_string());
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, auc, r.lr);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Seeded stratified split: each class is shuffled on its own and
/// `round(n_c * val_split)` of it goes to validation, keeping at least two
/// subjects of every class for training.
pub fn split_subjects(ids: &[String], labels: &[u8], val_split: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == class).collect();
        members.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        members.shuffle(rng);
        let n_val = ((members.len() as f64 * val_split).round() as usize).min(members.len().saturating_sub(2));
        if members.len() - n_val < 2 {
            return Err(TrainError::InsufficientData { class, count: members.len() - n_val });
        }
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    if val.is_empty() {
        return Err(TrainError::InvalidConfig(format!("val_split {val_split} leaves the validation partition empty")));
    }
    train.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    val.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    Ok((train, val))
}

/// Hooks into the epoch loop.
pub trait TrainObserver {
    /// May substitute the validation loss that drives checkpointing and
    /// early stopping.
    fn validation_loss(&mut self, _epoch: usize, measured: f64) -> f64 {
        measured
    }

    /// Called after each logged epoch with the current (not best) model and
    /// the un-augmented training partition. Returning `false` ends training.
    fn epoch_end(&mut self, _row: &EpochLog, _model: &Vit3d<f32>, _train: &[(&Volume, u8)]) -> bool {
        true
    }
}

/// Observer that changes nothing.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub best: Option<Checkpoint>,
    pub final_params: Vit3dParams<f32>,
    pub log: Vec<EpochLog>,
    pub split: Split,
    pub stopped_early: bool,
}

/// Mean loss of one batch and its averaged gradient, then one Adam step.
pub fn train_step(
    model: &mut Vit3d<f32>,
    adam: &mut Adam<f32>,
    batch: &[(&Volume, u8)],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for &(v, y) in batch {
        let logit = f64::from(model.forward_logit(v, Mode::Train, rng)?);
        let (loss, dlogit) = bce_with_logit(logit, y);
        total += loss;
        model.backward_into(dlogit as f32, &mut grads)?;
    }
    grads.scale(1.0 / batch.len() as f32);
    adam.step(&mut model.params, &grads, lr)?;
    Ok(total / batch.len() as f64)
}

/// Eval-mode mean loss and AUC.
pub fn score(model: &Vit3d<f32>, data: &[(&Volume, u8)]) -> Result<(f64, Option<f64>), TrainError> {
    let logits: Vec<f64> = data.par_iter().map(|(v, _)| model.logit(v).map(f64::from)).collect::<Result<_, _>>()?;
    let labels: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
    let loss = logits.iter().zip(&labels).map(|(&z, &y)| bce_with_logit(z, y).0).sum::<f64>() / data.len() as f64;
    let auc = roc_auc(&logits, &labels).ok().map(|(a, _)| a);
    Ok((loss, auc))
}

fn run_record(model_config: &Vit3dConfig, config: &TrainConfig, split: &Split) -> serde_json::Value {
    serde_json::json!({ "model": model_config, "train": config, "split": split })
}

pub fn train(volumes: &[Volume], labels: &[u8], model_config: &Vit3dConfig, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(volumes, labels, model_config, config, None, &mut Silent)
}

/// Full training run. With `checkpoint_path` set, the best checkpoint is
/// rewritten there every time validation loss strictly improves.
pub fn train_with(
    volumes: &[Volume],
    labels: &[u8],
    model_config: &Vit3dConfig,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model_config.validate()?;
    if volumes.len() != labels.len() {
        return Err(TrainError::LengthMismatch { volumes: volumes.len(), labels: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(TrainError::InvalidConfig(format!("label {bad}")));
    }
    let mut seen = BTreeSet::new();
    for v in volumes {
        if !seen.insert(v.subject_id.as_str()) {
            return Err(TrainError::DuplicateSubject(v.subject_id.clone()));
        }
        if v.modality != config.modality {
            return Err(TrainError::ModalityMismatch { subject: v.subject_id.clone(), found: v.modality, expected: config.modality });
        }
        if v.dims() != model_config.image_size {
            return Err(VitError::VolumeSize { expected: model_config.image_size, found: v.dims() }.into());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Vit3d::<f32>::init(*model_config, &mut rng)?;
    let ids: Vec<String> = volumes.iter().map(|v| v.subject_id.clone()).collect();
    let (train_idx, val_idx) = split_subjects(&ids, labels, config.val_split, &mut rng)?;
    let split = Split {
        train: train_idx.iter().map(|&i| ids[i].clone()).collect(),
        val: val_idx.iter().map(|&i| ids[i].clone()).collect(),
    };
    let train_set: Vec<(&Volume, u8)> = train_idx.iter().map(|&i| (&volumes[i], labels[i])).collect();
    let val_set: Vec<(&Volume, u8)> = val_idx.iter().map(|&i| (&volumes[i], labels[i])).collect();

    let (expanded, expanded_labels): (Vec<Volume>, Vec<u8>) = if config.augment {
        let originals: Vec<Volume> = train_set.iter().map(|(v, _)| (*v).clone()).collect();
        let out = expand_training_set(&originals)?;
        let n = originals.len();
        let ys = (0..out.len()).map(|i| train_set[i % n].1).collect();
        (out, ys)
    } else {
        train_set.iter().map(|(v, y)| ((*v).clone(), *y)).unzip()
    };

    let run = run_record(model_config, config, &split);
    let mut adam = Adam::new(&model.params, config.adam);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = None;
    let mut log = Vec::new();
    let mut lr = config.lr;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..expanded.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Volume, u8)> = chunk.iter().map(|&i| (&expanded[i], expanded_labels[i])).collect();
            loss_sum += train_step(&mut model, &mut adam, &batch, lr, &mut rng)? * batch.len() as f64;
        }
        let train_loss = loss_sum / expanded.len() as f64;
        let (measured, val_auc) = score(&model, &val_set)?;
        let val_loss = observer.validation_loss(epoch, measured);
        let row = EpochLog { epoch, train_loss, val_loss, val_auc, lr };
        lr *= config.lr_decay;

        let verdict = stopper.observe(epoch, val_loss);
        if verdict == Verdict::Improved {
            let ckpt = Checkpoint {
                config: *model_config,
                params: model.params.clone(),
                best_val_loss: Some(val_loss),
                epoch,
                run: run.clone(),
            };
            if let Some(path) = checkpoint_path {
                ckpt.save(path)?;
            }
            best = Some(ckpt);
        }
        log.push(row);
        let keep_going = observer.epoch_end(log.last().expect("row just pushed"), &model, &train_set);
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
        if !keep_going {
            break;
        }
    }
    Ok(TrainOutcome { best, final_params: model.params, log, split, stopped_early })
}

/// Eval-mode probabilities for each volume, keyed by subject and the
/// volume's modality.
pub fn evaluate(checkpoint: &Checkpoint, volumes: &[Volume]) -> Result<Vec<Prediction>, TrainError> {
    let model = checkpoint.model();
    volumes
        .par_iter()
        .map(|v| {
            let p = f64::from(model.predict(v)?);
            Ok(Prediction::new(v.subject_id.clone()).with(v.modality, p))
        })
        .collect()
}
