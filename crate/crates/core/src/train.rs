//! Classifier training and evaluation.

use rand::Rng as _;

use crate::data::{center_offset, crop_batch, permutation, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelForward};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{rng_for, Rng};
use crate::tape::{softmax_rows, BnMode, Tape, Var};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 100;

/// Which loss the labels drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Cross-entropy against the label argmax.
    Hard,
    /// KL divergence against the stored probability rows.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub target: TargetKind,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine: bool,
    /// Softmax temperature applied to student logits under [`TargetKind::Soft`].
    pub temperature: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, target: TargetKind, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.05, 0.9).with_weight_decay(5e-4),
            target,
            cosine: true,
            temperature: 1.0,
            seed,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy of the train-mode forward passes during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub dataset_id: String,
    pub epochs: usize,
    /// Eval-mode accuracy on the training set after the final epoch.
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

/// A trained model with its training record.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// `(running_mean, running_var)` per batch-norm layer in forward order.
    pub fn bn_stats(&self) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        read_bn_stats(&self.model)
    }
}

/// The stored batch-norm statistics that feature-statistic matching needs.
pub fn read_bn_stats(model: &Model) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let stats: Vec<_> = model.bn_layers().map(|s| (s.mean.clone(), s.var.clone())).collect();
    if stats.is_empty() {
        return Err(Error::config(format!(
            "architecture '{}' has no batch-norm layers; feature-statistic regularization needs stored BN statistics",
            model.arch.id
        )));
    }
    Ok(stats)
}

/// Takes model-sized inputs from dataset rows: random crops when an RNG is
/// given and the stored images are larger, center crops otherwise.
pub fn batch_inputs(ds: &LabeledDataset, rows: &[usize], input_hw: (usize, usize), rng: Option<&mut Rng>) -> Result<Tensor> {
    let (sh, sw) = ds.image_hw();
    let (h, w) = input_hw;
    if sh < h || sw < w {
        return Err(Error::config(format!(
            "dataset images are {sh}x{sw} but the model expects {h}x{w}"
        )));
    }
    if (sh, sw) == (h, w) {
        return Ok(ds.images.gather_outer(rows));
    }
    let offsets: Vec<(usize, usize)> = match rng {
        Some(rng) => rows
            .iter()
            .map(|_| (rng.random_range(0..=sh - h), rng.random_range(0..=sw - w)))
            .collect(),
        None => vec![center_offset(sh, sw, h, w); rows.len()],
    };
    Ok(crop_batch(&ds.images, rows, &offsets, h, w))
}

pub(crate) fn apply_loss(tape: &mut Tape, logits: Var, targets: &Tensor, cfg: &TrainConfig) -> Result<Var> {
    match cfg.target {
        TargetKind::Hard => {
            let ids = targets.argmax_rows();
            tape.cross_entropy_soft(logits, &crate::data::one_hot(&ids, targets.shape()[1]))
        }
        TargetKind::Soft => {
            let scaled = if cfg.temperature != 1.0 {
                tape.scale(logits, 1.0 / cfg.temperature)
            } else {
                logits
            };
            tape.kl_divergence(scaled, targets)
        }
    }
}

/// Trains `model` in place; returns the per-epoch record.
pub fn fit(
    model: &mut Model,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if train.num_classes != model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the model predicts {}",
            train.num_classes,
            model.num_classes()
        )));
    }
    let mut opt = OptimizerState::new(cfg.optimizer);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, "train/epoch", epoch as u64);
        let order = permutation(train.len(), &mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            if cfg.cosine {
                let lr = cfg.optimizer.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos());
                opt.set_learning_rate(lr);
            }
            let x = batch_inputs(train, rows, model.input_hw(), Some(&mut rng))?;
            let targets = train.target_rows(rows);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd: ModelForward = model.forward(&mut tape, xv, BnMode::Train, true)?;
            let loss = apply_loss(&mut tape, fwd.logits, &targets, cfg)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numerical(format!(
                    "training loss became {lv} at epoch {epoch}, step {step}; last finite epoch: {}",
                    epoch.checked_sub(1).map_or("none".to_string(), |e| e.to_string())
                )));
            }
            let preds = tape.value(fwd.logits).argmax_rows();
            correct += preds.iter().zip(targets.argmax_rows()).filter(|(p, t)| **p == *t).count();
            loss_sum += lv as f64 * rows.len() as f64;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&fwd, &grads);
            opt.step(model.params_mut())?;
            model.update_bn(&fwd.bn_batch);
            step += 1;
        }
        let val_accuracy = val.map(|v| accuracy(model, v)).transpose()?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Trains and packages the result as a checkpoint.
pub fn train_classifier(
    mut model: Model,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    dataset_id: &str,
) -> Result<ModelCheckpoint> {
    let history = fit(&mut model, train, val, cfg)?;
    let final_train_accuracy = accuracy(&model, train)?;
    let final_val_accuracy = val.map(|v| accuracy(&model, v)).transpose()?;
    Ok(ModelCheckpoint {
        model,
        meta: TrainingMeta {
            dataset_id: dataset_id.to_string(),
            epochs: cfg.epochs,
            final_train_accuracy,
            final_val_accuracy,
            seed: cfg.seed,
            history,
        },
    })
}

/// Eval-mode logits over a whole dataset (center crops).
pub fn dataset_logits(model: &Model, ds: &LabeledDataset) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ds.len() * model.num_classes());
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = batch_inputs(ds, chunk, model.input_hw(), None)?;
        data.extend_from_slice(model.logits(&x)?.data());
    }
    Ok(Tensor::from_parts(vec![ds.len(), model.num_classes()], data))
}

/// Top-1 accuracy against the label argmax.
pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("cannot score an empty dataset"));
    }
    let preds = dataset_logits(model, ds)?.argmax_rows();
    let hits = preds.iter().zip(ds.class_ids()).filter(|(p, t)| **p == *t).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Eval-mode class probabilities for model-sized images.
pub fn predict_probs(model: &Model, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let c = model.num_classes();
    let mut data = Vec::with_capacity(n * c);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = images.slice_outer(start, (start + EVAL_CHUNK).min(n));
        data.extend(softmax_rows(model.logits(&chunk)?.data(), c));
    }
    Ok(Tensor::from_parts(vec![n, c], data))
}
