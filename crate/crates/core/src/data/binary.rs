//! Readers for the CIFAR-10 binary and IDX formats.

use std::path::{Path, PathBuf};

use super::{LabeledDataset, Labels, Provenance, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by a 3×32×32 planar RGB image.
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BinaryFormat {
    Cifar10,
    /// IDX image file; the labels live in a companion IDX file.
    Idx { labels: PathBuf },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a standard binary dataset into normalized space. Grayscale IDX
/// images are replicated across three channels.
pub fn load_standard_binary(path: &Path, format: &BinaryFormat, split: Split) -> Result<LabeledDataset> {
    match format {
        BinaryFormat::Cifar10 => load_cifar(path, split),
        BinaryFormat::Idx { labels } => load_idx(path, labels, split),
    }
}

fn load_cifar(path: &Path, split: Split) -> Result<LabeledDataset> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR10_RECORD_BYTES;
        return Err(Error::format(
            path,
            format!(
                "expected a multiple of {CIFAR10_RECORD_BYTES} bytes, got {} (record {whole} truncated at byte offset {})",
                bytes.len(),
                whole * CIFAR10_RECORD_BYTES
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks(CIFAR10_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                path,
                format!("label {} at byte offset {} is not a CIFAR-10 class", rec[0], i * CIFAR10_RECORD_BYTES),
            ));
        }
        labels.push(rec[0] as u32);
        for (ch, plane) in rec[1..].chunks(1024).enumerate() {
            data.extend(plane.iter().map(|&b| (b as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
        }
    }
    LabeledDataset::new(
        Tensor::from_parts(vec![n, 3, 32, 32], data),
        Labels::Hard(labels),
        10,
        split,
        Provenance::Real,
        0,
    )
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("header truncated at byte offset {off}")))
}

fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let img = read(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad magic {magic:#010x} at byte offset 0, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let h = be_u32(&img, 8, images_path)? as usize;
    let w = be_u32(&img, 12, images_path)? as usize;
    let expected = 16 + n * h * w;
    if img.len() != expected {
        return Err(Error::format(
            images_path,
            format!("expected {expected} bytes, got {}", img.len()),
        ));
    }
    let lab = read(labels_path)?;
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad magic {lmagic:#010x} at byte offset 0, expected {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let ln = be_u32(&lab, 4, labels_path)? as usize;
    if ln != n || lab.len() != 8 + n {
        return Err(Error::format(
            labels_path,
            format!("expected {} bytes for {n} labels, got {}", 8 + n, lab.len()),
        ));
    }
    let labels: Vec<u32> = lab[8..].iter().map(|&b| b as u32).collect();
    let classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    let mut data = Vec::with_capacity(n * 3 * h * w);
    for im in img[16..].chunks(h * w) {
        for _ in 0..3 {
            data.extend(im.iter().map(|&b| (b as f32 / 255.0 - MNIST_MEAN) / MNIST_STD));
        }
    }
    LabeledDataset::new(
        Tensor::from_parts(vec![n, 3, h, w], data),
        Labels::Hard(labels),
        classes,
        split,
        Provenance::Real,
        0,
    )
}
