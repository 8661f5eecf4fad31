//! Model inversion: optimizing input canvases until a frozen teacher assigns
//! them target labels, with recursive label calibration across outer steps
//! and regional (random-crop) updates inside each inner loop.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{center_offset, one_hot, LabeledDataset, Labels, Provenance, Split, PIXEL_CLAMP};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tape::{crop_nchw, softmax_rows, BnMode, Tape, Var};
use crate::tensor::Tensor;
use crate::train::read_bn_stats;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub batch_size: usize,
    pub canvas_hw: (usize, usize),
    /// Teacher input size; each step optimizes one window of this size.
    pub crop_hw: (usize, usize),
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub learning_rate: f32,
    pub lambda_tv: f32,
    pub lambda_feat: f32,
    pub init_noise_std: f32,
    pub pixel_clamp: (f32, f32),
    /// Feed each outer step's teacher prediction back as the next target.
    /// When off, targets stay one-hot and only the final prediction is kept.
    pub calibrate: bool,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            batch_size: 10,
            canvas_hw: (40, 40),
            crop_hw: (32, 32),
            inner_iters: 300,
            outer_iters: 3,
            learning_rate: 0.1,
            lambda_tv: 1e-4,
            lambda_feat: 1.0,
            init_noise_std: 1.0,
            pixel_clamp: PIXEL_CLAMP,
            calibrate: true,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    /// Turns off regional updates by shrinking the canvas to the crop.
    pub fn whole_image(mut self) -> Self {
        self.canvas_hw = self.crop_hw;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.crop_hw.0 > self.canvas_hw.0 || self.crop_hw.1 > self.canvas_hw.1 {
            return bad("crop must fit inside the canvas");
        }
        if self.crop_hw.0 == 0 || self.crop_hw.1 == 0 {
            return bad("crop must be non-empty");
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be at least 1 (use a noise dataset for the no-optimization control)");
        }
        if self.outer_iters == 0 {
            return bad("outer_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda_tv >= 0.0 && self.lambda_feat >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.learning_rate > 0.0) || !(self.init_noise_std >= 0.0) {
            return bad("learning rate must be positive and noise std non-negative");
        }
        if !(self.pixel_clamp.0 < self.pixel_clamp.1) {
            return bad("pixel clamp range is empty");
        }
        Ok(())
    }
}

/// Loss components of one regional step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ce: f32,
    pub tv: f32,
    pub feat: f32,
    pub total: f32,
}

/// A window of the canvas, shared across the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.h && x >= self.left && x < self.left + self.w
    }
}

/// One batch being synthesized.
#[derive(Clone, Debug)]
pub struct SynthBatchState {
    /// `[n, 3, canvas_h, canvas_w]`.
    pub canvas: Tensor,
    /// Current targets (`ŷ` of the previous outer step), `[n, classes]`.
    pub targets: Tensor,
    pub class_ids: Vec<usize>,
    pub outer_step: usize,
    optimizer: OptimizerState,
    rng: Rng,
}

impl SynthBatchState {
    /// Restarts the canvas optimizer (Adam at the configured learning rate).
    pub fn reset_optimizer(&mut self, config: &SynthesisConfig) {
        self.optimizer = OptimizerState::new(OptimizerConfig::adam(config.learning_rate));
    }
}

fn noise_canvas(n: usize, config: &SynthesisConfig, rng: &mut Rng) -> Tensor {
    let (h, w) = config.canvas_hw;
    let len = n * 3 * h * w;
    let data: Vec<f32> = if config.init_noise_std > 0.0 {
        let dist = Normal::new(0.0f32, config.init_noise_std).expect("validated std");
        (0..len)
            .map(|_| dist.sample(rng).clamp(config.pixel_clamp.0, config.pixel_clamp.1))
            .collect()
    } else {
        vec![0.0; len]
    };
    Tensor::from_parts(vec![n, 3, h, w], data)
}

/// Fresh noise canvases with one-hot targets. `stream` keys the RNG so
/// independent batches draw independent noise.
pub fn init_batch(config: &SynthesisConfig, class_targets: &[usize], num_classes: usize, stream: u64) -> Result<SynthBatchState> {
    config.validate()?;
    if class_targets.is_empty() {
        return Err(Error::config("class target list is empty"));
    }
    if let Some(&bad) = class_targets.iter().find(|&&c| c >= num_classes) {
        return Err(Error::config(format!("class id {bad} out of range for {num_classes} classes")));
    }
    let mut rng = rng_for(config.seed, "synthesis/batch", stream);
    let canvas = noise_canvas(class_targets.len(), config, &mut rng);
    Ok(SynthBatchState {
        canvas,
        targets: one_hot(class_targets, num_classes),
        class_ids: class_targets.to_vec(),
        outer_step: 0,
        optimizer: OptimizerState::new(OptimizerConfig::adam(config.learning_rate)),
        rng,
    })
}

/// Stored BN statistics of every BN layer, checked up front.
pub struct TeacherStats(Vec<(Vec<f32>, Vec<f32>)>);

impl TeacherStats {
    pub fn read(teacher: &Model) -> Result<Self> {
        Ok(TeacherStats(read_bn_stats(teacher)?))
    }
}

fn feature_loss_on_tape(tape: &mut Tape, bn_inputs: &[Var], stats: &TeacherStats) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (&h, (mean, var)) in bn_inputs.iter().zip(&stats.0) {
        let d = tape.channel_stat_distance(h, mean, var)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, d)?,
            None => d,
        });
    }
    Ok(acc)
}

/// `Σ_l ‖E_l(batch) − running_mean_l‖₂ + ‖Var_l(batch) − running_var_l‖₂` for a
/// model-sized batch, with the teacher normalizing by its stored statistics.
pub fn feature_stat_loss(teacher: &Model, crop_batch: &Tensor) -> Result<f32> {
    let stats = TeacherStats::read(teacher)?;
    let mut tape = Tape::new();
    let x = tape.constant(crop_batch.clone());
    let fwd = teacher.forward(&mut tape, x, BnMode::Eval, false)?;
    let loss = feature_loss_on_tape(&mut tape, &fwd.bn_inputs, &stats)?.expect("at least one BN layer");
    Ok(tape.value(loss).item())
}

/// Draws the region for one step: uniform over valid offsets.
pub fn sample_region(config: &SynthesisConfig, rng: &mut Rng) -> Region {
    let (ch, cw) = config.canvas_hw;
    let (h, w) = config.crop_hw;
    Region {
        top: rng.random_range(0..=ch - h),
        left: rng.random_range(0..=cw - w),
        h,
        w,
    }
}

/// One optimizer step on a random window of the canvas; pixels outside the
/// window are not touched.
pub fn regional_step(
    state: &mut SynthBatchState,
    teacher: &Model,
    stats: &TeacherStats,
    config: &SynthesisConfig,
    iteration: usize,
) -> Result<(Region, StepLosses)> {
    let region = sample_region(config, &mut state.rng);
    let mut tape = Tape::new();
    let canvas = tape.leaf(state.canvas.clone());
    let crop = tape.crop(canvas, region.top, region.left, region.h, region.w)?;
    let fwd = teacher.forward(&mut tape, crop, BnMode::Eval, false)?;
    let ce = tape.cross_entropy_soft(fwd.logits, &state.targets)?;
    let mut total = ce;
    let tv = tape.total_variation(crop)?;
    if config.lambda_tv > 0.0 {
        let s = tape.scale(tv, config.lambda_tv);
        total = tape.add(total, s)?;
    }
    let feat = if config.lambda_feat > 0.0 {
        let f = feature_loss_on_tape(&mut tape, &fwd.bn_inputs, stats)?.expect("at least one BN layer");
        let s = tape.scale(f, config.lambda_feat);
        total = tape.add(total, s)?;
        tape.value(f).item()
    } else {
        0.0
    };
    let losses = StepLosses {
        ce: tape.value(ce).item(),
        tv: tape.value(tv).item(),
        feat,
        total: tape.value(total).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::numerical(format!(
            "synthesis loss non-finite at iteration {iteration}: ce={} tv={} feat={} total={}",
            losses.ce, losses.tv, losses.feat, losses.total
        )));
    }
    let grads = tape.backward(total)?;
    let g = grads.get(canvas).expect("canvas is a leaf").clone();
    let (n, c, ch, cw) = state.canvas.nchw()?;
    let mut mask = vec![false; n * c * ch * cw];
    for plane in 0..n * c {
        for y in region.top..region.top + region.h {
            let row = (plane * ch + y) * cw;
            mask[row + region.left..row + region.left + region.w].fill(true);
        }
    }
    state.optimizer.step_masked(0, &mut state.canvas, &g, &mask)?;
    let (lo, hi) = config.pixel_clamp;
    for (v, &m) in state.canvas.data_mut().iter_mut().zip(&mask) {
        if m {
            *v = v.clamp(lo, hi);
        }
    }
    Ok((region, losses))
}

/// Runs `inner_iters` regional steps with a fresh optimizer; returns the loss trajectory.
pub fn inner_loop(state: &mut SynthBatchState, teacher: &Model, stats: &TeacherStats, config: &SynthesisConfig) -> Result<Vec<StepLosses>> {
    state.reset_optimizer(config);
    (0..config.inner_iters)
        .map(|i| regional_step(state, teacher, stats, config, i).map(|(_, l)| l))
        .collect()
}

/// Teacher logits on the center window of every canvas.
pub fn center_logits(teacher: &Model, canvas: &Tensor, crop_hw: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = canvas.nchw()?;
    let (top, left) = center_offset(h, w, crop_hw.0, crop_hw.1);
    teacher.logits(&crop_nchw(canvas, top, left, crop_hw.0, crop_hw.1))
}

/// Replaces the targets with the teacher's softmax on the center crop and
/// advances the outer step.
pub fn calibrate_labels(state: &mut SynthBatchState, teacher: &Model, config: &SynthesisConfig) -> Result<Tensor> {
    let logits = center_logits(teacher, &state.canvas, config.crop_hw)?;
    let c = logits.shape()[1];
    state.targets = Tensor::from_parts(logits.shape().to_vec(), softmax_rows(logits.data(), c));
    state.outer_step += 1;
    Ok(logits)
}

/// Everything one recursive synthesis chain produced.
#[derive(Clone, Debug)]
pub struct SynthesisOutcome {
    /// Final canvases, `[n, 3, canvas_h, canvas_w]`.
    pub images: Tensor,
    /// Teacher softmax on the final canvases.
    pub soft_labels: Tensor,
    /// Pre-softmax teacher outputs on the final canvases.
    pub logits: Tensor,
    /// `ŷ_t` for `t = 1..=outer_iters`.
    pub label_history: Vec<Tensor>,
    /// One inner-loop loss trajectory per outer step.
    pub trajectories: Vec<Vec<StepLosses>>,
}

/// Outer loop: each step re-initializes from fresh noise, synthesizes against
/// the previous step's labels (one-hot at the start), then recalibrates.
pub fn recursive_synthesize(teacher: &Model, class_targets: &[usize], config: &SynthesisConfig, stream: u64) -> Result<SynthesisOutcome> {
    let stats = TeacherStats::read(teacher)?;
    let mut state = init_batch(config, class_targets, teacher.num_classes(), stream)?;
    let one_hot_targets = state.targets.clone();
    let mut label_history = Vec::with_capacity(config.outer_iters);
    let mut trajectories = Vec::with_capacity(config.outer_iters);
    let mut logits = None;
    for t in 1..=config.outer_iters {
        if t > 1 {
            let mut rng = rng_for(derive_seed(config.seed, "synthesis/outer", t as u64), "synthesis/batch", stream);
            state.canvas = noise_canvas(class_targets.len(), config, &mut rng);
            state.rng = rng;
        }
        trajectories.push(inner_loop(&mut state, teacher, &stats, config)?);
        logits = Some(calibrate_labels(&mut state, teacher, config)?);
        label_history.push(state.targets.clone());
        if !config.calibrate {
            state.targets = one_hot_targets.clone();
        }
    }
    Ok(SynthesisOutcome {
        images: state.canvas,
        soft_labels: label_history.last().expect("outer_iters >= 1").clone(),
        logits: logits.expect("outer_iters >= 1"),
        label_history,
        trajectories,
    })
}

/// A synthesized dataset together with its per-batch loss trajectories.
pub struct SyntheticDataset {
    pub dataset: LabeledDataset,
    /// `(batch index, outer step, losses)` for every inner loop.
    pub trajectories: Vec<(usize, usize, Vec<StepLosses>)>,
}

/// Class target lists for `per_class` canvases of each class, cut into batches.
pub fn class_batches(num_classes: usize, per_class: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
    all.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Synthesizes `per_class_count` canvases per class, balanced by initial class id.
pub fn build_dataset(teacher: &Model, config: &SynthesisConfig, per_class_count: usize, parallelism: usize) -> Result<SyntheticDataset> {
    config.validate()?;
    if per_class_count == 0 {
        return Err(Error::config("per_class_count must be at least 1"));
    }
    TeacherStats::read(teacher)?;
    let c = teacher.num_classes();
    let batches: Vec<(usize, Vec<usize>)> = class_batches(c, per_class_count, config.batch_size)
        .into_iter()
        .enumerate()
        .collect();
    let outcomes = crate::par::map(parallelism, batches, |(i, targets)| {
        let replica = teacher.clone();
        recursive_synthesize(&replica, &targets, config, i as u64).map(|o| (i, o))
    })?;
    let (ch, cw) = config.canvas_hw;
    let n = c * per_class_count;
    let mut images = Vec::with_capacity(n * 3 * ch * cw);
    let mut labels = Vec::with_capacity(n * c);
    let mut trajectories = Vec::new();
    for (i, o) in outcomes {
        images.extend_from_slice(o.images.data());
        labels.extend_from_slice(o.soft_labels.data());
        for (t, tr) in o.trajectories.into_iter().enumerate() {
            trajectories.push((i, t + 1, tr));
        }
    }
    let dataset = LabeledDataset::new(
        Tensor::from_parts(vec![n, 3, ch, cw], images),
        Labels::Soft(Tensor::from_parts(vec![n, c], labels)),
        c,
        Split::Train,
        Provenance::Synthetic,
        config.seed,
    )?;
    Ok(SyntheticDataset { dataset, trajectories })
}

/// Shannon entropy (nats) of each probability row.
pub fn row_entropy(probs: &Tensor) -> Vec<f64> {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -(p as f64) * (p as f64).ln())
                .sum()
        })
        .collect()
}

/// Number of classes above `threshold` in each probability row.
pub fn classes_above(probs: &Tensor, threshold: f32) -> Vec<usize> {
    let c = probs.shape()[1];
    probs.data().chunks(c).map(|row| row.iter().filter(|&&p| p > threshold).count()).collect()
}
