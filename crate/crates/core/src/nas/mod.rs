//! Choice-block search space, a weight-sharing supernet over it, and three
//! search strategies: uniform single-path training with evolutionary search,
//! softmax-mixture gradient search, and policy-gradient search.

mod darts;
mod evolution;
mod report;
mod rl;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

pub use darts::{darts_search, DartsConfig, DartsOutcome};
pub use evolution::{evolve, evolutionary_search, EvolutionConfig, EvolutionResult};
pub use report::{read_reports, write_reports, SearchReport};
pub use rl::{reinforce, rl_search, Baseline, BaselineKind, Policy, RlConfig, RlOutcome};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ActShape, Architecture, Block, LayerSpec, Model};
use crate::optim::OptimizerState;
use crate::rng::{rng_for, Rng};
use crate::tape::{BatchStats, BnMode, Tape, Var, BN_MOMENTUM};
use crate::tensor::Tensor;
use crate::train::{apply_loss, batch_inputs, fit, TrainConfig};

const EVAL_CHUNK: usize = 100;

/// One candidate operation of a searchable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Conv3,
    Conv5,
    SepConv3,
    /// Outputs zeros; only used to plant a known-bad option.
    Zero,
}

impl Choice {
    pub fn name(self) -> &'static str {
        match self {
            Choice::Conv3 => "conv3x3",
            Choice::Conv5 => "conv5x5",
            Choice::SepConv3 => "sep3x3",
            Choice::Zero => "zero",
        }
    }

    fn spec(self, out_channels: usize, stride: usize) -> LayerSpec {
        match self {
            Choice::Conv3 => LayerSpec::ConvBnRelu { out_channels, kernel: 3, stride },
            Choice::Conv5 => LayerSpec::ConvBnRelu { out_channels, kernel: 5, stride },
            Choice::SepConv3 => LayerSpec::SepConvBnRelu { out_channels, kernel: 3, stride },
            Choice::Zero => LayerSpec::Zero { out_channels, stride },
        }
    }
}

/// A fixed stem, `widths.len()` searchable layers, global pooling and a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub stem: LayerSpec,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub choices: Vec<Choice>,
}

impl SearchSpace {
    /// 4 layers × {conv3x3, conv5x5, sep3x3} on 32×32 inputs: 81 architectures.
    pub fn desk(num_classes: usize) -> Self {
        SearchSpace {
            input: (3, 32, 32),
            num_classes,
            stem: LayerSpec::ConvBnRelu { out_channels: 8, kernel: 3, stride: 2 },
            widths: vec![8, 16, 16, 32],
            strides: vec![1, 2, 1, 2],
            choices: vec![Choice::Conv3, Choice::Conv5, Choice::SepConv3],
        }
    }

    /// The desk space with choice 0 replaced by a zero block in every layer.
    pub fn rigged_zero(num_classes: usize) -> Self {
        SearchSpace {
            choices: vec![Choice::Zero, Choice::Conv3, Choice::SepConv3],
            ..Self::desk(num_classes)
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn size(&self) -> usize {
        self.num_choices().pow(self.num_layers() as u32)
    }

    pub fn layer_spec(&self, layer: usize, choice: usize) -> LayerSpec {
        self.choices[choice].spec(self.widths[layer], self.strides[layer])
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config("search space needs matching, non-empty widths and strides"));
        }
        if self.choices.is_empty() {
            return Err(Error::config("search space needs at least one choice per layer"));
        }
        Ok(())
    }

    pub fn check(&self, arch: &ArchDescriptor) -> Result<()> {
        if arch.0.len() != self.num_layers() {
            return Err(Error::config(format!(
                "architecture {arch} has {} layers, space has {}",
                arch.0.len(),
                self.num_layers()
            )));
        }
        if let Some(&c) = arch.0.iter().find(|&&c| c >= self.num_choices()) {
            return Err(Error::config(format!(
                "choice {c} in {arch} out of range for {} choices",
                self.num_choices()
            )));
        }
        Ok(())
    }

    /// The stand-alone network for `arch`.
    pub fn architecture(&self, arch: &ArchDescriptor) -> Result<Architecture> {
        self.check(arch)?;
        let mut layers = vec![self.stem];
        layers.extend(arch.0.iter().enumerate().map(|(l, &c)| self.layer_spec(l, c)));
        layers.push(LayerSpec::GlobalPool);
        layers.push(LayerSpec::Classifier { classes: self.num_classes });
        Ok(Architecture {
            id: format!("nas-{arch}"),
            input: self.input,
            layers,
        })
    }

    /// Multiply-accumulate count of the stand-alone network for one sample.
    pub fn macs(&self, arch: &ArchDescriptor) -> Result<u64> {
        Ok(Model::build(&self.architecture(arch)?, 0)?.macs())
    }

    /// Every architecture in lexicographic order.
    pub fn enumerate(&self) -> Vec<ArchDescriptor> {
        let (l, k) = (self.num_layers(), self.num_choices());
        (0..self.size())
            .map(|mut i| {
                let mut c = vec![0; l];
                for slot in c.iter_mut().rev() {
                    *slot = i % k;
                    i /= k;
                }
                ArchDescriptor(c)
            })
            .collect()
    }

    pub fn random_arch(&self, rng: &mut Rng) -> ArchDescriptor {
        ArchDescriptor((0..self.num_layers()).map(|_| rng.random_range(0..self.num_choices())).collect())
    }

    /// `n` distinct architectures drawn uniformly without replacement.
    pub fn sample_distinct(&self, n: usize, seed: u64) -> Result<Vec<ArchDescriptor>> {
        if n > self.size() {
            return Err(Error::config(format!("cannot sample {n} distinct architectures from {}", self.size())));
        }
        let mut rng = rng_for(seed, "nas/sample", 0);
        let all = self.enumerate();
        let idx = rand::seq::index::sample(&mut rng, all.len(), n);
        Ok(idx.into_iter().map(|i| all[i].clone()).collect())
    }
}

/// Per-layer choice indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchDescriptor(pub Vec<usize>);

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::config(format!("bad architecture descriptor '{s}'"))))
            .collect::<Result<Vec<_>>>()
            .map(ArchDescriptor)
    }
}

/// What a supernet forward pass recorded, keyed by block index.
pub struct SuperForward {
    pub logits: Var,
    pub param_vars: Vec<(usize, Vec<Var>)>,
    pub bn_batch: Vec<(usize, BatchStats)>,
}

/// Shared weights for every (layer, choice) pair plus a fixed stem and head.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet {
    pub space: SearchSpace,
    /// Stem, then layer-major choice blocks, then pooling and classifier.
    pub blocks: Vec<Block>,
    slot_offsets: Vec<usize>,
    /// Optimizer updates applied to each `(layer, choice)` weight set.
    pub update_counts: Vec<Vec<u64>>,
}

impl SuperNet {
    pub fn build(space: &SearchSpace, seed: u64) -> Result<SuperNet> {
        space.validate()?;
        let mut rng = rng_for(seed, "supernet/init", 0);
        let (c, h, w) = space.input;
        let stem = Block::new(space.stem, ActShape::spatial(c, h, w), "stem", &mut rng)?;
        let mut shape = stem.output;
        let mut blocks = vec![stem];
        for l in 0..space.num_layers() {
            let mut out = None;
            for k in 0..space.num_choices() {
                let b = Block::new(space.layer_spec(l, k), shape, &format!("layer{l}.choice{k}"), &mut rng)?;
                if out.is_some_and(|o| o != b.output) {
                    return Err(Error::config(format!("choices of layer {l} disagree on output shape")));
                }
                out = Some(b.output);
                blocks.push(b);
            }
            shape = out.expect("at least one choice");
        }
        let pool = Block::new(LayerSpec::GlobalPool, shape, "pool", &mut rng)?;
        let cls = Block::new(LayerSpec::Classifier { classes: space.num_classes }, pool.output, "head", &mut rng)?;
        blocks.push(pool);
        blocks.push(cls);
        let mut slot_offsets = Vec::with_capacity(blocks.len());
        let mut acc = 0;
        for b in &blocks {
            slot_offsets.push(acc);
            acc += b.params.len();
        }
        Ok(SuperNet {
            space: space.clone(),
            blocks,
            slot_offsets,
            update_counts: vec![vec![0; space.num_choices()]; space.num_layers()],
        })
    }

    fn choice_block(&self, layer: usize, choice: usize) -> usize {
        1 + layer * self.space.num_choices() + choice
    }

    fn head_blocks(&self) -> [usize; 2] {
        let n = self.blocks.len();
        [n - 2, n - 1]
    }

    /// Block indices along a path, in forward order.
    pub fn path_blocks(&self, arch: &ArchDescriptor) -> Vec<usize> {
        let mut idx = vec![0];
        idx.extend(arch.0.iter().enumerate().map(|(l, &c)| self.choice_block(l, c)));
        idx.extend(self.head_blocks());
        idx
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (c, h, w) = self.space.input;
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape(
                "supernet",
                format!("input {shape:?} does not match expected [n, {c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    fn run_block(&self, b: usize, tape: &mut Tape, x: Var, mode: BnMode, track: bool, out: &mut SuperForward) -> Result<Var> {
        let r = self.blocks[b].forward(tape, x, mode, track)?;
        if track {
            out.param_vars.push((b, r.param_vars));
        }
        if let Some(s) = r.batch {
            out.bn_batch.push((b, s));
        }
        Ok(r.y)
    }

    /// Forward along one path.
    pub fn forward_path(&self, tape: &mut Tape, x: Var, arch: &ArchDescriptor, mode: BnMode, track: bool) -> Result<SuperForward> {
        self.space.check(arch)?;
        self.check_input(tape, x)?;
        let mut out = SuperForward {
            logits: x,
            param_vars: Vec::new(),
            bn_batch: Vec::new(),
        };
        let mut cur = x;
        for b in self.path_blocks(arch) {
            cur = self.run_block(b, tape, cur, mode, track, &mut out)?;
        }
        out.logits = cur;
        Ok(out)
    }

    /// Forward with every layer a weighted sum of all its choices;
    /// `weights[l]` is a rank-1 variable of length `num_choices`.
    pub fn forward_mixture(&self, tape: &mut Tape, x: Var, weights: &[Var], mode: BnMode, track: bool) -> Result<SuperForward> {
        self.check_input(tape, x)?;
        if weights.len() != self.space.num_layers() {
            return Err(Error::config("one mixture weight vector per layer required"));
        }
        let mut out = SuperForward {
            logits: x,
            param_vars: Vec::new(),
            bn_batch: Vec::new(),
        };
        let mut cur = self.run_block(0, tape, x, mode, track, &mut out)?;
        for (l, &wv) in weights.iter().enumerate() {
            let ys = (0..self.space.num_choices())
                .map(|k| self.run_block(self.choice_block(l, k), tape, cur, mode, track, &mut out))
                .collect::<Result<Vec<_>>>()?;
            cur = tape.mixture(&ys, wv)?;
        }
        for b in self.head_blocks() {
            cur = self.run_block(b, tape, cur, mode, track, &mut out)?;
        }
        out.logits = cur;
        Ok(out)
    }

    /// Accumulates gradients, steps every block that took part and folds the
    /// batch statistics into the running statistics of those blocks.
    fn apply_step(&mut self, fwd: &SuperForward, grads: &crate::tape::Gradients, opt: &mut OptimizerState) -> Result<()> {
        for (b, vars) in &fwd.param_vars {
            self.blocks[*b].accumulate_grads(vars, grads);
        }
        let touched: Vec<usize> = fwd.param_vars.iter().map(|(b, _)| *b).collect();
        let offsets = &self.slot_offsets;
        let params = self
            .blocks
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| touched.contains(i))
            .flat_map(|(i, b)| b.params.iter_mut().enumerate().map(move |(j, p)| (offsets[i] + j, p)));
        opt.step_slots(params)?;
        for (b, stats) in &fwd.bn_batch {
            self.blocks[*b].bn.as_mut().expect("stats come from bn blocks").update(stats, BN_MOMENTUM);
        }
        let k = self.space.num_choices();
        for &b in &touched {
            if b >= 1 && b < 1 + self.space.num_layers() * k {
                self.update_counts[(b - 1) / k][(b - 1) % k] += 1;
            }
        }
        Ok(())
    }

    /// The stand-alone model for `arch` carrying the supernet's weights.
    pub fn extract(&self, arch: &ArchDescriptor) -> Result<Model> {
        let mut model = Model::build(&self.space.architecture(arch)?, 0)?;
        for (dst, src) in model.blocks.iter_mut().zip(self.path_blocks(arch)) {
            let s = &self.blocks[src];
            dst.params.iter_mut().zip(&s.params).for_each(|(d, p)| d.value = p.value.clone());
            dst.bn.clone_from(&s.bn);
        }
        Ok(model)
    }
}

/// Log of a uniform-sampling supernet run.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetLog {
    pub paths: Vec<ArchDescriptor>,
    pub losses: Vec<f32>,
}

/// Trains a supernet with one uniformly sampled path per minibatch; only that
/// path's weights (plus stem and head) are updated.
pub fn train_supernet(space: &SearchSpace, train: &LabeledDataset, cfg: &TrainConfig) -> Result<(SuperNet, SupernetLog)> {
    let mut net = SuperNet::build(space, cfg.seed)?;
    let log = continue_supernet(&mut net, train, cfg)?;
    Ok((net, log))
}

/// Uniform-sampling training on an existing supernet.
pub fn continue_supernet(net: &mut SuperNet, train: &LabeledDataset, cfg: &TrainConfig) -> Result<SupernetLog> {
    if train.is_empty() {
        return Err(Error::config("supernet training set is empty"));
    }
    if train.num_classes != net.space.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the search space predicts {}",
            train.num_classes, net.space.num_classes
        )));
    }
    let hw = (net.space.input.1, net.space.input.2);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut path_rng = rng_for(cfg.seed, "supernet/paths", 0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut log = SupernetLog {
        paths: Vec::with_capacity(total),
        losses: Vec::with_capacity(total),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, "supernet/epoch", epoch as u64);
        let order = crate::data::permutation(train.len(), &mut rng);
        for rows in order.chunks(cfg.batch_size.max(1)) {
            if cfg.cosine {
                let lr = cfg.optimizer.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos());
                opt.set_learning_rate(lr);
            }
            let arch = net.space.random_arch(&mut path_rng);
            let x = batch_inputs(train, rows, hw, Some(&mut rng))?;
            let targets = train.target_rows(rows);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = net.forward_path(&mut tape, xv, &arch, BnMode::Train, true)?;
            let loss = apply_loss(&mut tape, fwd.logits, &targets, cfg)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numerical(format!("supernet loss became {lv} at step {step} (path {arch})")));
            }
            let grads = tape.backward(loss)?;
            net.apply_step(&fwd, &grads, &mut opt)?;
            log.paths.push(arch);
            log.losses.push(lv);
            step += 1;
        }
    }
    Ok(log)
}

/// Top-1 accuracy of one supernet path against the label argmax, eval mode.
pub fn infer_path_accuracy(net: &SuperNet, arch: &ArchDescriptor, val: &LabeledDataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::config("cannot score an architecture on an empty validation set"));
    }
    let ids = val.class_ids();
    let rows: Vec<usize> = (0..val.len()).collect();
    score_rows(net, arch, val, &rows, &ids)
}

fn score_rows(net: &SuperNet, arch: &ArchDescriptor, ds: &LabeledDataset, rows: &[usize], ids: &[usize]) -> Result<f64> {
    let hw = (net.space.input.1, net.space.input.2);
    let mut hits = 0usize;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = batch_inputs(ds, chunk, hw, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = net.forward_path(&mut tape, xv, arch, BnMode::Eval, false)?;
        let preds = tape.value(fwd.logits).argmax_rows();
        hits += preds.iter().zip(chunk).filter(|(p, &r)| **p == ids[r]).count();
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Trains the stand-alone network for `arch` from a fresh init (seeded by
/// `cfg.seed`) and scores it on `eval`.
pub fn retrain_arch(space: &SearchSpace, arch: &ArchDescriptor, train: &LabeledDataset, eval: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, f64)> {
    let mut model = Model::build(&space.architecture(arch)?, cfg.seed)?;
    fit(&mut model, train, None, cfg)?;
    let acc = crate::train::accuracy(&model, eval)?;
    Ok((model, acc))
}

/// Accuracy of every architecture in the space, in enumeration order.
pub fn exhaustive_sweep(net: &SuperNet, val: &LabeledDataset) -> Result<Vec<(ArchDescriptor, f64)>> {
    net.space
        .enumerate()
        .into_iter()
        .map(|a| infer_path_accuracy(net, &a, val).map(|acc| (a, acc)))
        .collect()
}

/// Uniform-sampling supernet training followed by evolutionary search on `val`.
pub fn spos_search(
    space: &SearchSpace,
    train: &LabeledDataset,
    val: &LabeledDataset,
    supernet_cfg: &TrainConfig,
    evo: &EvolutionConfig,
    dataset_id: &str,
) -> Result<(SuperNet, SearchReport)> {
    let (net, log) = train_supernet(space, train, supernet_cfg)?;
    let result = evolutionary_search(&net, val, evo)?;
    let report = SearchReport {
        strategy: "spos".into(),
        dataset_id: dataset_id.into(),
        arch: result.best.clone(),
        search_val_accuracy: result.best_fitness,
        retrain_accuracy: None,
        seed: evo.seed,
        steps: log.paths.len() as u64,
        candidate_evaluations: result.candidates as u64,
    };
    Ok((net, report))
}

/// Random row subset of size `n` (all rows when `n` covers the set).
pub(crate) fn sample_rows(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, n).into_vec()
}

/// Rank-1 softmax of a length-`k` row stored as `[1, k]`.
pub(crate) fn softmax_weights(tape: &mut Tape, alpha_row: Var) -> Result<Var> {
    let s = tape.softmax(alpha_row)?;
    tape.select_row(s, 0)
}

pub(crate) fn alpha_tensor(row: &[f32]) -> Tensor {
    Tensor::from_parts(vec![1, row.len()], row.to_vec())
}
