//! Layer building blocks, the architecture registry and sequential models.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::rng::{rng_for, Rng};
use crate::tape::{BatchStats, BnMode, Gradients, Tape, Var, BN_MOMENTUM};
use crate::tensor::Tensor;

/// Shape of the activation flowing between layers (batch axis excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn spatial(c: usize, h: usize, w: usize) -> Self {
        ActShape::Spatial { c, h, w }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// `k×k` convolution (no bias), batch norm, ReLU; padding `k/2`.
    ConvBnRelu { out_channels: usize, kernel: usize, stride: usize },
    /// `k×k` depthwise convolution, 1×1 pointwise convolution, batch norm, ReLU.
    SepConvBnRelu { out_channels: usize, kernel: usize, stride: usize },
    /// Emits zeros of the shape a conv block with the same geometry would.
    Zero { out_channels: usize, stride: usize },
    MaxPool,
    GlobalPool,
    /// Fully connected layer followed by ReLU.
    Dense { units: usize },
    /// Final fully connected layer producing logits.
    Classifier { classes: usize },
}

impl LayerSpec {
    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                ActShape::Spatial { c, h, w } => Ok((c, h, w)),
                ActShape::Flat(_) => Err(Error::config(format!("{what} needs a spatial input, got {input:?}"))),
            }
        };
        let strided = |h: usize, w: usize, k: usize, s: usize| -> Result<(usize, usize)> {
            if s == 0 || k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("unsupported kernel {k} / stride {s}")));
            }
            Ok(((h + 2 * (k / 2) - k) / s + 1, (w + 2 * (k / 2) - k) / s + 1))
        };
        Ok(match *self {
            LayerSpec::ConvBnRelu { out_channels, kernel, stride }
            | LayerSpec::SepConvBnRelu { out_channels, kernel, stride } => {
                let (_, h, w) = spatial("conv block")?;
                let (h, w) = strided(h, w, kernel, stride)?;
                ActShape::spatial(out_channels, h, w)
            }
            LayerSpec::Zero { out_channels, stride } => {
                let (_, h, w) = spatial("zero block")?;
                let (h, w) = strided(h, w, 3, stride)?;
                ActShape::spatial(out_channels, h, w)
            }
            LayerSpec::MaxPool => {
                let (c, h, w) = spatial("max pool")?;
                if h < 2 || w < 2 {
                    return Err(Error::config(format!("max pool on {h}x{w}")));
                }
                ActShape::spatial(c, h / 2, w / 2)
            }
            LayerSpec::GlobalPool => ActShape::Flat(spatial("global pool")?.0),
            LayerSpec::Dense { units } => match input {
                ActShape::Flat(_) => ActShape::Flat(units),
                _ => return Err(Error::config("dense layer needs a flat input (add a global pool)")),
            },
            LayerSpec::Classifier { classes } => match input {
                ActShape::Flat(_) => ActShape::Flat(classes),
                _ => return Err(Error::config("classifier needs a flat input (add a global pool)")),
            },
        })
    }

    pub fn has_bn(&self) -> bool {
        matches!(self, LayerSpec::ConvBnRelu { .. } | LayerSpec::SepConvBnRelu { .. })
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`, with the batch
    /// variance converted to its unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        let correction = if batch.count > 1 {
            batch.count as f32 / (batch.count - 1) as f32
        } else {
            1.0
        };
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

fn kaiming(shape: &[usize], fan_in: usize, gain: f32, rng: &mut Rng) -> Tensor {
    let std = (gain / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// One layer with its parameters and (for conv blocks) batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: LayerSpec,
    pub input: ActShape,
    pub output: ActShape,
    pub params: Vec<Param>,
    pub bn: Option<BnStats>,
}

/// What a block's forward pass recorded.
pub struct BlockOutput {
    pub y: Var,
    /// One entry per parameter, in `Block::params` order.
    pub param_vars: Vec<Var>,
    /// Input to the batch norm, for feature-statistic losses.
    pub bn_input: Option<Var>,
    pub batch: Option<BatchStats>,
}

impl Block {
    pub fn new(spec: LayerSpec, input: ActShape, name: &str, rng: &mut Rng) -> Result<Block> {
        let output = spec.output_shape(input)?;
        let mut params = Vec::new();
        let mut bn = None;
        match (spec, input) {
            (LayerSpec::ConvBnRelu { out_channels, kernel, .. }, ActShape::Spatial { c, .. }) => {
                let fan_in = c * kernel * kernel;
                params.push(Param::new(
                    format!("{name}.conv.weight"),
                    kaiming(&[out_channels, c, kernel, kernel], fan_in, 2.0, rng),
                ));
                params.push(Param::new(format!("{name}.bn.gamma"), Tensor::ones(&[out_channels])));
                params.push(Param::new(format!("{name}.bn.beta"), Tensor::zeros(&[out_channels])));
                bn = Some(BnStats::fresh(out_channels));
            }
            (LayerSpec::SepConvBnRelu { out_channels, kernel, .. }, ActShape::Spatial { c, .. }) => {
                params.push(Param::new(
                    format!("{name}.dw.weight"),
                    kaiming(&[c, 1, kernel, kernel], kernel * kernel, 2.0, rng),
                ));
                params.push(Param::new(
                    format!("{name}.pw.weight"),
                    kaiming(&[out_channels, c, 1, 1], c, 2.0, rng),
                ));
                params.push(Param::new(format!("{name}.bn.gamma"), Tensor::ones(&[out_channels])));
                params.push(Param::new(format!("{name}.bn.beta"), Tensor::zeros(&[out_channels])));
                bn = Some(BnStats::fresh(out_channels));
            }
            (LayerSpec::Dense { units }, ActShape::Flat(f)) => {
                params.push(Param::new(format!("{name}.dense.weight"), kaiming(&[units, f], f, 2.0, rng)));
                params.push(Param::new(format!("{name}.dense.bias"), Tensor::zeros(&[units])));
            }
            (LayerSpec::Classifier { classes }, ActShape::Flat(f)) => {
                params.push(Param::new(format!("{name}.fc.weight"), kaiming(&[classes, f], f, 1.0, rng)));
                params.push(Param::new(format!("{name}.fc.bias"), Tensor::zeros(&[classes])));
            }
            _ => {}
        }
        Ok(Block {
            spec,
            input,
            output,
            params,
            bn,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode, track: bool) -> Result<BlockOutput> {
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if track {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut bn_input = None;
        let mut batch = None;
        let y = match self.spec {
            LayerSpec::ConvBnRelu { kernel, stride, .. } => {
                let h = tape.conv2d(x, param_vars[0], None, stride, kernel / 2)?;
                let bn = self.bn.as_ref().expect("conv block has bn");
                let (z, stats) = tape.batchnorm2d(h, param_vars[1], param_vars[2], &bn.mean, &bn.var, mode)?;
                bn_input = Some(h);
                batch = Some(stats);
                tape.relu(z)
            }
            LayerSpec::SepConvBnRelu { kernel, stride, .. } => {
                let d = tape.depthwise_conv2d(x, param_vars[0], None, stride, kernel / 2)?;
                let h = tape.conv2d(d, param_vars[1], None, 1, 0)?;
                let bn = self.bn.as_ref().expect("sep block has bn");
                let (z, stats) = tape.batchnorm2d(h, param_vars[2], param_vars[3], &bn.mean, &bn.var, mode)?;
                bn_input = Some(h);
                batch = Some(stats);
                tape.relu(z)
            }
            LayerSpec::Zero { .. } => {
                let n = tape.value(x).shape()[0];
                let ActShape::Spatial { c, h, w } = self.output else { unreachable!() };
                tape.constant(Tensor::zeros(&[n, c, h, w]))
            }
            LayerSpec::MaxPool => tape.max_pool2x2(x)?,
            LayerSpec::GlobalPool => tape.global_avg_pool(x)?,
            LayerSpec::Dense { .. } => {
                let h = tape.dense(x, param_vars[0], Some(param_vars[1]))?;
                tape.relu(h)
            }
            LayerSpec::Classifier { .. } => tape.dense(x, param_vars[0], Some(param_vars[1]))?,
        };
        Ok(BlockOutput {
            y,
            param_vars: if track { param_vars } else { Vec::new() },
            bn_input,
            batch,
        })
    }

    /// Adds the tape gradients of this block's parameters into their buffers.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate(g);
            }
        }
    }

    /// Multiply-accumulate count for one sample.
    pub fn macs(&self) -> u64 {
        match (self.spec, self.input, self.output) {
            (LayerSpec::ConvBnRelu { kernel, .. }, ActShape::Spatial { c, .. }, ActShape::Spatial { c: o, h, w }) => {
                (o * c * kernel * kernel * h * w) as u64
            }
            (LayerSpec::SepConvBnRelu { kernel, .. }, ActShape::Spatial { c, .. }, ActShape::Spatial { c: o, h, w }) => {
                (c * kernel * kernel * h * w + o * c * h * w) as u64
            }
            (LayerSpec::Dense { .. } | LayerSpec::Classifier { .. }, ActShape::Flat(i), ActShape::Flat(o)) => (i * o) as u64,
            _ => 0,
        }
    }
}

/// A registered layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub id: String,
    /// `(channels, height, width)` of the input.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

pub const REGISTERED_ARCHITECTURES: [&str; 3] = ["teacher", "student", "linear"];

impl Architecture {
    /// Looks up a registered architecture for 32×32 RGB inputs.
    pub fn registered(id: &str, num_classes: usize) -> Result<Architecture> {
        let conv = |out_channels, stride| LayerSpec::ConvBnRelu {
            out_channels,
            kernel: 3,
            stride,
        };
        let layers = match id {
            "teacher" => vec![
                conv(16, 1),
                conv(32, 2),
                conv(32, 1),
                conv(64, 2),
                LayerSpec::GlobalPool,
                LayerSpec::Classifier { classes: num_classes },
            ],
            "student" => vec![
                conv(8, 2),
                conv(16, 1),
                conv(32, 2),
                LayerSpec::GlobalPool,
                LayerSpec::Classifier { classes: num_classes },
            ],
            // No batch norm: a pooled linear probe.
            "linear" => vec![LayerSpec::GlobalPool, LayerSpec::Classifier { classes: num_classes }],
            other => {
                return Err(Error::config(format!(
                    "unknown architecture '{other}' (registered: {})",
                    REGISTERED_ARCHITECTURES.join(", ")
                )))
            }
        };
        Ok(Architecture {
            id: id.to_string(),
            input: (3, 32, 32),
            layers,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Classifier { classes }) => Some(*classes),
            _ => None,
        }
    }
}

/// Logits plus everything a training or synthesis step needs from a forward pass.
pub struct ModelForward {
    pub logits: Var,
    pub param_vars: Vec<Vec<Var>>,
    /// Batch-norm inputs in forward order.
    pub bn_inputs: Vec<Var>,
    pub bn_batch: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub blocks: Vec<Block>,
}

impl Model {
    /// Builds with fresh Kaiming-normal weights; BN stats start at mean 0, variance 1.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Model> {
        let mut rng = rng_for(seed, "init", 0);
        let (c, h, w) = arch.input;
        let mut shape = ActShape::spatial(c, h, w);
        let mut blocks = Vec::with_capacity(arch.layers.len());
        for (i, &spec) in arch.layers.iter().enumerate() {
            let block = Block::new(spec, shape, &format!("layer{i}"), &mut rng)?;
            shape = block.output;
            blocks.push(block);
        }
        if !matches!(shape, ActShape::Flat(_)) || arch.num_classes().is_none() {
            return Err(Error::config(format!("architecture '{}' must end in a classifier", arch.id)));
        }
        Ok(Model {
            arch: arch.clone(),
            blocks,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes().expect("validated at build")
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.arch.input.1, self.arch.input.2)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode, track: bool) -> Result<ModelForward> {
        let (c, h, w) = self.arch.input;
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape(
                "model",
                format!("input {shape:?} does not match expected [n, {c}, {h}, {w}]"),
            ));
        }
        let mut cur = x;
        let mut out = ModelForward {
            logits: x,
            param_vars: Vec::with_capacity(self.blocks.len()),
            bn_inputs: Vec::new(),
            bn_batch: Vec::new(),
        };
        for block in &self.blocks {
            let b = block.forward(tape, cur, mode, track)?;
            cur = b.y;
            out.param_vars.push(b.param_vars);
            out.bn_inputs.extend(b.bn_input);
            out.bn_batch.extend(b.batch);
        }
        out.logits = cur;
        Ok(out)
    }

    pub fn accumulate_grads(&mut self, fwd: &ModelForward, grads: &Gradients) {
        for (block, vars) in self.blocks.iter_mut().zip(&fwd.param_vars) {
            block.accumulate_grads(vars, grads);
        }
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_bn(&mut self, batch: &[BatchStats]) {
        let mut it = batch.iter();
        for block in &mut self.blocks {
            if let Some(bn) = block.bn.as_mut() {
                bn.update(it.next().expect("one batch stat per bn layer"), BN_MOMENTUM);
            }
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.blocks.iter().flat_map(|b| b.params.iter())
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnStats> {
        self.blocks.iter().filter_map(|b| b.bn.as_ref())
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnStats> {
        self.blocks.iter_mut().filter_map(|b| b.bn.as_mut())
    }

    /// Eval-mode logits for a batch already at the model's input size.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, x, BnMode::Eval, false)?;
        Ok(tape.value(fwd.logits).clone())
    }

    pub fn macs(&self) -> u64 {
        self.blocks.iter().map(Block::macs).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_forward_shape() {
        let arch = Architecture::registered("teacher", 10).unwrap();
        let m = Model::build(&arch, 1).unwrap();
        let logits = m.logits(&Tensor::zeros(&[8, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[8, 10]);
        assert_eq!(m.bn_layers().count(), 4);
    }

    #[test]
    fn build_is_deterministic() {
        let arch = Architecture::registered("teacher", 10).unwrap();
        assert_eq!(Model::build(&arch, 5).unwrap(), Model::build(&arch, 5).unwrap());
        assert_ne!(Model::build(&arch, 5).unwrap(), Model::build(&arch, 6).unwrap());
    }

    #[test]
    fn unknown_architecture_rejected() {
        let err = Architecture::registered("resnet34", 10).unwrap_err().to_string();
        assert!(err.contains("resnet34"));
    }

    #[test]
    fn layers_must_compose() {
        let arch = Architecture {
            id: "broken".into(),
            input: (3, 8, 8),
            layers: vec![LayerSpec::Classifier { classes: 2 }],
        };
        assert!(Model::build(&arch, 0).is_err());
    }

    #[test]
    fn bn_update_recurrence() {
        let mut s = BnStats::fresh(2);
        s.update(
            &BatchStats {
                mean: vec![1.0, -2.0],
                var: vec![3.0, 3.0],
                count: 4,
            },
            0.1,
        );
        assert!((s.mean[0] - 0.1).abs() < 1e-7 && (s.mean[1] + 0.2).abs() < 1e-7);
        assert!((s.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-6);
    }

    #[test]
    fn macs_of_conv_block() {
        let arch = Architecture {
            id: "one".into(),
            input: (3, 8, 8),
            layers: vec![
                LayerSpec::ConvBnRelu { out_channels: 4, kernel: 3, stride: 2 },
                LayerSpec::GlobalPool,
                LayerSpec::Classifier { classes: 2 },
            ],
        };
        let m = Model::build(&arch, 0).unwrap();
        assert_eq!(m.macs(), (4 * 3 * 9 * 4 * 4 + 4 * 2) as u64);
    }
}
