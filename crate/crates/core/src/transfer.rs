//! Distilling a fresh student from a soft-labeled dataset.

use std::path::Path;

use crate::data::export::{read_csv, write_csv};
use crate::data::{LabeledDataset, Labels};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::train::{train_classifier, ModelCheckpoint, TargetKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    /// Registered student architecture.
    pub student: String,
    /// Epochs, optimizer, temperature and seed; the loss is always KL.
    pub train: TrainConfig,
    pub dataset_id: String,
}

impl TransferConfig {
    pub fn new(dataset_id: &str, epochs: usize, seed: u64) -> Self {
        TransferConfig {
            student: "student".into(),
            train: TrainConfig::new(epochs, TargetKind::Soft, seed),
            dataset_id: dataset_id.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    pub student: ModelCheckpoint,
    pub real_val_accuracy: f64,
}

/// Trains the student from scratch with KL divergence against the stored soft
/// labels, on random crops of the stored canvases, and scores it on `real_val`.
pub fn distill(teacher: &Model, dataset: &LabeledDataset, real_val: &LabeledDataset, cfg: &TransferConfig) -> Result<TransferResult> {
    if !matches!(dataset.labels, Labels::Soft(_)) {
        return Err(Error::config("distillation needs a dataset with soft labels"));
    }
    if dataset.num_classes != teacher.num_classes() || real_val.num_classes != teacher.num_classes() {
        return Err(Error::config(format!(
            "teacher predicts {} classes but the datasets have {} and {}",
            teacher.num_classes(),
            dataset.num_classes,
            real_val.num_classes
        )));
    }
    let arch = Architecture::registered(&cfg.student, teacher.num_classes())?;
    let (sh, sw) = dataset.image_hw();
    if sh < arch.input.1 || sw < arch.input.2 {
        return Err(Error::config(format!(
            "student expects {}x{} inputs but the dataset stores {sh}x{sw}",
            arch.input.1, arch.input.2
        )));
    }
    let mut train = cfg.train.clone();
    train.target = TargetKind::Soft;
    let model = Model::build(&arch, train.seed)?;
    let student = train_classifier(model, dataset, None, &train, &cfg.dataset_id)?;
    let real_val_accuracy = crate::train::accuracy(&student.model, real_val)?;
    Ok(TransferResult {
        student,
        real_val_accuracy,
    })
}

/// One line of the transfer result table.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub dataset_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub real_val_accuracy: f64,
}

pub const TRANSFER_HEADER: [&str; 4] = ["dataset", "seed", "epochs", "real_val_acc"];

pub fn write_transfer_csv(path: &Path, rows: &[TransferRow]) -> Result<()> {
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset_id.clone(),
                r.seed.to_string(),
                r.epochs.to_string(),
                r.real_val_accuracy.to_string(),
            ]
        })
        .collect();
    write_csv(path, &TRANSFER_HEADER, &records)
}

pub fn read_transfer_csv(path: &Path) -> Result<Vec<TransferRow>> {
    let (header, rows) = read_csv(path)?;
    if header != TRANSFER_HEADER {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    rows.iter()
        .map(|r| {
            let bad = || Error::format(path, format!("bad transfer row {r:?}"));
            if r.len() != 4 {
                return Err(bad());
            }
            Ok(TransferRow {
                dataset_id: r[0].clone(),
                seed: r[1].parse().map_err(|_| bad())?,
                epochs: r[2].parse().map_err(|_| bad())?,
                real_val_accuracy: r[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
