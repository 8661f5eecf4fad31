use rand_distr::{Distribution, StandardNormal};

use super::{center_offset, crop_batch, LabeledDataset, Labels, Provenance, Split, PIXEL_CLAMP};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train::predict_probs;

/// Gaussian-noise images labeled by the teacher's eval-mode softmax on the
/// center crop. `shape` is `(channels, height, width)`.
pub fn generate_noise_dataset(teacher: &Model, shape: (usize, usize, usize), n: usize, seed: u64) -> Result<LabeledDataset> {
    let (c, h, w) = shape;
    let (th, tw) = teacher.input_hw();
    if n == 0 {
        return Err(Error::config("noise dataset needs at least one image"));
    }
    if c != teacher.arch.input.0 || h < th || w < tw {
        return Err(Error::config(format!(
            "noise images {c}x{h}x{w} cannot feed a teacher expecting {}x{th}x{tw}",
            teacher.arch.input.0
        )));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        let mut rng = rng_for(seed, "noise", i as u64);
        for _ in 0..c * h * w {
            let v: f32 = StandardNormal.sample(&mut rng);
            data.push(v.clamp(PIXEL_CLAMP.0, PIXEL_CLAMP.1));
        }
    }
    let images = Tensor::from_parts(vec![n, c, h, w], data);
    let rows: Vec<usize> = (0..n).collect();
    let view = if (h, w) == (th, tw) {
        images.clone()
    } else {
        crop_batch(&images, &rows, &vec![center_offset(h, w, th, tw); n], th, tw)
    };
    let probs = predict_probs(teacher, &view)?;
    LabeledDataset::new(images, Labels::Soft(probs), teacher.num_classes(), Split::Train, Provenance::Noise, seed)
}
