//! Datasets, file formats and exports.

mod binary;
pub mod export;
pub mod format;
mod noise;
mod shapes;

pub use binary::{load_standard_binary, BinaryFormat, CIFAR10_RECORD_BYTES, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use noise::generate_noise_dataset;
pub use shapes::{generate_shapes, ShapeClass, ShapesSpec, SHAPES_MEAN, SHAPES_STD};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::check_probability_rows;
use crate::tensor::Tensor;

/// Pixel range of the normalized image space.
pub const PIXEL_CLAMP: (f32, f32) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
    Noise,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Real => 0,
            Provenance::Synthetic => 1,
            Provenance::Noise => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Provenance::Real),
            1 => Some(Provenance::Synthetic),
            2 => Some(Provenance::Noise),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::Noise => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Hard(Vec<u32>),
    /// `[n, classes]` probability rows.
    Soft(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, 3, h, w]` in normalized pixel space.
    pub images: Tensor,
    pub labels: Labels,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Labels,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            images,
            labels,
            num_classes,
            split,
            provenance,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _, _, _) = self.images.nchw()?;
        if self.num_classes == 0 {
            return Err(Error::config("dataset has zero classes"));
        }
        match &self.labels {
            Labels::Hard(ids) => {
                if ids.len() != n {
                    return Err(Error::config(format!("{} labels for {n} images", ids.len())));
                }
                if let Some(bad) = ids.iter().find(|&&c| c as usize >= self.num_classes) {
                    return Err(Error::config(format!(
                        "label {bad} out of range for {} classes",
                        self.num_classes
                    )));
                }
            }
            Labels::Soft(p) => {
                if p.shape() != [n, self.num_classes] {
                    return Err(Error::config(format!(
                        "soft labels {:?} do not match {n} images x {} classes",
                        p.shape(),
                        self.num_classes
                    )));
                }
                check_probability_rows("dataset", p)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h, w)` of the stored images.
    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Class index per sample: the hard label or the argmax of the soft label.
    pub fn class_ids(&self) -> Vec<usize> {
        match &self.labels {
            Labels::Hard(ids) => ids.iter().map(|&c| c as usize).collect(),
            Labels::Soft(p) => p.argmax_rows(),
        }
    }

    /// Label rows as probability vectors (one-hot for hard labels).
    pub fn target_rows(&self, rows: &[usize]) -> Tensor {
        match &self.labels {
            Labels::Hard(ids) => one_hot(&rows.iter().map(|&r| ids[r] as usize).collect::<Vec<_>>(), self.num_classes),
            Labels::Soft(p) => p.gather_outer(rows),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        let labels = match &self.labels {
            Labels::Hard(ids) => Labels::Hard(rows.iter().map(|&r| ids[r]).collect()),
            Labels::Soft(p) => Labels::Soft(p.gather_outer(rows)),
        };
        LabeledDataset {
            images: self.images.gather_outer(rows),
            labels,
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance,
            seed: self.seed,
        }
    }

    /// Splits into two halves with every class spread evenly across both
    /// (by label argmax), preserving order within each half.
    pub fn split_halves(&self) -> (LabeledDataset, LabeledDataset) {
        let ids = self.class_ids();
        let mut seen = vec![0usize; self.num_classes];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, &c) in ids.iter().enumerate() {
            if seen[c] % 2 == 0 {
                a.push(i);
            } else {
                b.push(i);
            }
            seen[c] += 1;
        }
        (self.subset(&a), self.subset(&b))
    }

    /// Takes `per_class` samples of every class (by label argmax) for a holdout,
    /// returning `(rest, holdout)`.
    pub fn holdout_per_class(&self, per_class: usize) -> (LabeledDataset, LabeledDataset) {
        let ids = self.class_ids();
        let mut taken = vec![0usize; self.num_classes];
        let (mut rest, mut hold) = (Vec::new(), Vec::new());
        for (i, &c) in ids.iter().enumerate() {
            if taken[c] < per_class {
                taken[c] += 1;
                hold.push(i);
            } else {
                rest.push(i);
            }
        }
        (self.subset(&rest), self.subset(&hold))
    }
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0f32; classes.len() * num_classes];
    for (i, &c) in classes.iter().enumerate() {
        data[i * num_classes + c] = 1.0;
    }
    Tensor::from_parts(vec![classes.len(), num_classes], data)
}

/// A shuffled order of `0..n`.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// `[n, c, h, w]` batch of `h×w` crops at per-image offsets.
pub fn crop_batch(images: &Tensor, rows: &[usize], offsets: &[(usize, usize)], h: usize, w: usize) -> Tensor {
    let (_, c, sh, sw) = images.nchw().expect("images are NCHW");
    let src = images.data();
    let mut out = Vec::with_capacity(rows.len() * c * h * w);
    for (&r, &(top, left)) in rows.iter().zip(offsets) {
        for ch in 0..c {
            let plane = (r * c + ch) * sh * sw;
            for y in 0..h {
                let s0 = plane + (top + y) * sw + left;
                out.extend_from_slice(&src[s0..s0 + w]);
            }
        }
    }
    Tensor::from_parts(vec![rows.len(), c, h, w], out)
}

/// Offset of a centered `h×w` window in an `sh×sw` image.
pub fn center_offset(sh: usize, sw: usize, h: usize, w: usize) -> (usize, usize) {
    ((sh - h) / 2, (sw - w) / 2)
}
