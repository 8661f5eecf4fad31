//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! A [`Tape`] lives for one forward pass. Values are appended in execution
//! order, so node indices are already a topological order and
//! [`Tape::backward`] simply walks them in reverse. Backward consumes the tape.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{check_same_shape, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        depthwise: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Pad {
        x: Var,
        pad: usize,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    Mixture {
        inputs: Vec<Var>,
        weights: Var,
    },
    TotalVariation(Var),
    SoftCrossEntropy {
        logits: Var,
        grad_scale: Vec<f32>,
    },
    ChannelStatDistance {
        x: Var,
        mean: Vec<f64>,
        dmean: Vec<f64>,
        dvar: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics observed by a train-mode batch norm, for callers that track them.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f32>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2 input, got {s:?}"))),
    }
}

/// Validates that each row is a probability vector.
pub fn check_probability_rows(op: &'static str, probs: &Tensor) -> Result<()> {
    let (_, c) = rows_cols(op, probs)?;
    for (i, row) in probs.data().chunks(c).enumerate() {
        let mut sum = 0.0f64;
        for &p in row {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::config(format!("{op}: row {i} has invalid probability {p}")));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::config(format!("{op}: row {i} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

/// Row-wise softmax with `f64` accumulation.
pub fn softmax_rows(logits: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for &v in src {
            z += ((v - max) as f64).exp();
        }
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (((v - max) as f64).exp() / z) as f32;
        }
    }
    out
}

fn log_softmax_rows(logits: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = src.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lz = z.ln();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ((v - max) as f64 - lz) as f32;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_require: bool) -> Var {
        let op = if inputs_require { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad: inputs_require,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (weights, or the image under synthesis).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = rows_cols("dense", self.value(x))?;
        let (fout, win) = rows_cols("dense", self.value(w))?;
        if fin != win {
            return Err(Error::shape(
                "dense",
                format!("input has {fin} features but weight expects {win}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?} does not match {fout} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0f32; n * fout];
        kernels::gemm(n, fin, fout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![n, fout], out), Op::Dense { x, w, b }, rg))
    }

    /// Dense 2-D convolution, `w: [out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, false)
    }

    /// Per-channel convolution, `w: [c, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, true)
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let name = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let (n, c, h, wd) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape(name, format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        let (o, wc, kh, kw) = self
            .value(w)
            .nchw()
            .map_err(|_| Error::shape(name, format!("kernel must be rank 4, got {:?}", self.value(w).shape())))?;
        if kh != kw {
            return Err(Error::shape(name, format!("kernel must be square, got {kh}x{kw}")));
        }
        if depthwise {
            if o != c || wc != 1 {
                return Err(Error::shape(
                    name,
                    format!("kernel {o}x{wc} does not match {c} input channels (expected {c}x1)"),
                ));
            }
        } else if wc != c {
            return Err(Error::shape(
                name,
                format!("input has {c} channels but kernel expects {wc}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    name,
                    format!("bias {:?} does not match {o} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom::new(n, c, h, wd, kh, stride, pad).ok_or_else(|| {
            Error::shape(
                name,
                format!("kernel {kh} stride {stride} pad {pad} does not fit a {h}x{wd} input"),
            )
        })?;
        let bias = b.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), bias, &geom)
        } else {
            kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, o, &geom)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![n, o, geom.ho, geom.wo], out);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                out_channels: o,
                depthwise,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("max_pool2x2", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool2x2", format!("spatial size {h}x{w} is below 2x2")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("global_avg_pool", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), rg))
    }

    /// Batch normalization over `N×H×W` per channel.
    ///
    /// In [`BnMode::Train`] the batch statistics normalize the input and are
    /// returned so the caller can fold them into running statistics. In
    /// [`BnMode::Eval`] `running_mean`/`running_var` normalize and the
    /// returned statistics are still the batch's own.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        mode: BnMode,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("batchnorm2d", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{what} has length {len} but input has {c} channels"),
                ));
            }
        }
        let stats = channel_moments(self.value(x));
        let (norm_mean, norm_var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => (stats.0.clone(), stats.1.clone()),
            BnMode::Eval => (
                running_mean.iter().map(|&v| v as f64).collect(),
                running_var.iter().map(|&v| v as f64).collect(),
            ),
        };
        let inv_std: Vec<f32> = norm_var
            .iter()
            .map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
            .collect();
        let hw = h * w;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let m = norm_mean[ch] as f32;
                for i in off..off + hw {
                    let xh = (src[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch = BatchStats {
            mean: stats.0.iter().map(|&v| v as f32).collect(),
            var: stats.1.iter().map(|&v| v as f32).collect(),
            count: n * hw,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            rg,
        );
        Ok((var, batch))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("softmax", self.value(x))?;
        let out = softmax_rows(self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("log_softmax", self.value(x))?;
        let out = log_softmax_rows(self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::LogSoftmax(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p * q)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Spatial window `[top..top+h, left..left+w]` of an NCHW tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, sh, sw) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("crop", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        if h == 0 || w == 0 || top + h > sh || left + w > sw {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({top},{left}) exceeds {sh}x{sw}"),
            ));
        }
        let out = crop_nchw(self.value(x), top, left, h, w);
        let _ = (n, c);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop { x, top, left }, rg))
    }

    /// Zero padding of `pad` pixels on every spatial border.
    pub fn pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("pad", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ph * pw];
        for plane in 0..n * c {
            for y in 0..h {
                let s = &src[(plane * h + y) * w..(plane * h + y + 1) * w];
                let d0 = (plane * ph + y + pad) * pw + pad;
                out[d0..d0 + w].copy_from_slice(s);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, ph, pw], out), Op::Pad { x, pad }, rg))
    }

    /// Row `row` of a rank-2 tensor, as a rank-1 tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, c) = rows_cols("select_row", self.value(x))?;
        if row >= r {
            return Err(Error::shape("select_row", format!("row {row} out of {r}")));
        }
        let data = self.value(x).data()[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c], data), Op::SelectRow { x, row }, rg))
    }

    /// `Σ_k weights[k] · inputs[k]` for same-shaped inputs and a rank-1 weight vector.
    pub fn mixture(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("mixture", "no inputs"));
        }
        if self.value(weights).shape() != [inputs.len()] {
            return Err(Error::shape(
                "mixture",
                format!(
                    "{} inputs but weights have shape {:?}",
                    inputs.len(),
                    self.value(weights).shape()
                ),
            ));
        }
        for &v in &inputs[1..] {
            check_same_shape("mixture", self.value(inputs[0]), self.value(v))?;
        }
        let wv = self.value(weights).data().to_vec();
        let mut out = vec![0.0f32; self.value(inputs[0]).len()];
        for (&v, &wk) in inputs.iter().zip(&wv) {
            for (o, &a) in out.iter_mut().zip(self.value(v).data()) {
                *o += wk * a;
            }
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let rg = self.rg(weights) || inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mixture {
                inputs: inputs.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Sum of squared forward differences along both spatial axes, no wraparound.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        self.value(x)
            .nchw()
            .map_err(|_| Error::shape("total_variation", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        let v = total_variation(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v as f32), Op::TotalVariation(x), rg))
    }

    /// Batch mean of `-Σ_c target_c · log_softmax(logits)_c`.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (n, c) = rows_cols("cross_entropy_soft", self.value(logits))?;
        check_same_shape("cross_entropy_soft", self.value(logits), targets)?;
        check_probability_rows("cross_entropy_soft", targets)?;
        let ls = log_softmax_rows(self.value(logits).data(), c);
        let mut total = 0.0f64;
        for (l, t) in ls.iter().zip(targets.data()) {
            total -= *t as f64 * *l as f64;
        }
        let loss = (total / n as f64) as f32;
        let rg = self.rg(logits);
        let grad_scale = if rg { soft_target_grad(&ls, targets.data(), n) } else { Vec::new() };
        Ok(self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, grad_scale }, rg))
    }

    /// Batch mean of `KL(teacher ‖ softmax(student_logits))`; zero-probability terms contribute 0.
    pub fn kl_divergence(&mut self, student_logits: Var, teacher_probs: &Tensor) -> Result<Var> {
        let (n, c) = rows_cols("kl_divergence", self.value(student_logits))?;
        check_same_shape("kl_divergence", self.value(student_logits), teacher_probs)?;
        check_probability_rows("kl_divergence", teacher_probs)?;
        let ls = log_softmax_rows(self.value(student_logits).data(), c);
        let mut total = 0.0f64;
        for (l, &p) in ls.iter().zip(teacher_probs.data()) {
            if p > 0.0 {
                total += p as f64 * ((p as f64).ln() - *l as f64);
            }
        }
        let loss = (total / n as f64) as f32;
        let rg = self.rg(student_logits);
        // d/dlogits is softmax - p, the same as soft cross-entropy.
        let grad_scale = if rg { soft_target_grad(&ls, teacher_probs.data(), n) } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: student_logits,
                grad_scale,
            },
            rg,
        ))
    }

    /// `‖mean_c(x) − ref_mean‖₂ + ‖var_c(x) − ref_var‖₂` over the channels of an NCHW tensor.
    pub fn channel_stat_distance(&mut self, x: Var, ref_mean: &[f32], ref_var: &[f32]) -> Result<Var> {
        let (_, c, _, _) = self
            .value(x)
            .nchw()
            .map_err(|_| Error::shape("channel_stat_distance", format!("input must be NCHW, got {:?}", self.value(x).shape())))?;
        if ref_mean.len() != c || ref_var.len() != c {
            return Err(Error::shape(
                "channel_stat_distance",
                format!(
                    "reference statistics have lengths {}/{} but input has {c} channels",
                    ref_mean.len(),
                    ref_var.len()
                ),
            ));
        }
        let (mean, var) = channel_moments(self.value(x));
        let dmean: Vec<f64> = mean.iter().zip(ref_mean).map(|(a, &b)| a - b as f64).collect();
        let dvar: Vec<f64> = var.iter().zip(ref_var).map(|(a, &b)| a - b as f64).collect();
        let norm = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>().sqrt();
        let loss = norm(&dmean) + norm(&dvar);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::ChannelStatDistance { x, mean, dmean, dvar },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every reachable input that requires them.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::config("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, g: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            g(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (n, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    kernels::gemm(n, fout, fin, 1.0, dy, false, self.value(*w).data(), false, 1.0, gx)
                });
                acc(*w, &mut |gw| {
                    kernels::gemm(fout, n, fin, 1.0, dy, true, self.value(*x).data(), false, 1.0, gw)
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for j in 0..fout {
                            gb[j] += (0..n).map(|r| dy[r * fout + j] as f64).sum::<f64>() as f32;
                        }
                    });
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                out_channels,
                depthwise,
            } => {
                let want = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = if *depthwise {
                    kernels::depthwise_backward(self.value(*x).data(), self.value(*w).data(), dy, geom, want)
                } else {
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dy, *out_channels, geom, want)
                };
                if let Some(dx) = g.dx {
                    acc(*x, &mut |s| add_into(s, &dx));
                }
                if let Some(dw) = g.dw {
                    acc(*w, &mut |s| add_into(s, &dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Relu(x) => acc(*x, &mut |s| {
                for ((g, &y), &d) in s.iter_mut().zip(node.value.data()).zip(dy) {
                    if y > 0.0 {
                        *g += d;
                    }
                }
            }),
            Op::MaxPool { x, argmax } => acc(*x, &mut |s| {
                for (&idx, &d) in argmax.iter().zip(dy) {
                    s[idx as usize] += d;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let hw = h * w;
                acc(*x, &mut |s| {
                    for (plane, &d) in dy.iter().enumerate() {
                        let g = d / hw as f32;
                        for v in &mut s[plane * hw..(plane + 1) * hw] {
                            *v += g;
                        }
                    }
                })
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] += dy[i] as f64;
                            sum_dy_xhat[ch] += (dy[i] * xhat[i]) as f64;
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for ch in 0..c {
                        s[ch] += sum_dy_xhat[ch] as f32;
                    }
                });
                acc(*beta, &mut |s| {
                    for ch in 0..c {
                        s[ch] += sum_dy[ch] as f32;
                    }
                });
                acc(*x, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            if *train {
                                let mean_dy = (sum_dy[ch] / m) as f32;
                                let mean_dy_xhat = (sum_dy_xhat[ch] / m) as f32;
                                for i in off..off + hw {
                                    s[i] += k * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                }
                            } else {
                                for i in off..off + hw {
                                    s[i] += k * dy[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                acc(*x, &mut |s| {
                    for ((gs, ys), ds) in s.chunks_mut(c).zip(node.value.data().chunks(c)).zip(dy.chunks(c)) {
                        let dot: f64 = ys.iter().zip(ds).map(|(&y, &d)| (y * d) as f64).sum();
                        for ((g, &y), &d) in gs.iter_mut().zip(ys).zip(ds) {
                            *g += y * (d - dot as f32);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                acc(*x, &mut |s| {
                    for ((gs, ys), ds) in s.chunks_mut(c).zip(node.value.data().chunks(c)).zip(dy.chunks(c)) {
                        let total: f64 = ds.iter().map(|&d| d as f64).sum();
                        for ((g, &y), &d) in gs.iter_mut().zip(ys).zip(ds) {
                            *g += d - y.exp() * total as f32;
                        }
                    }
                })
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, dy));
                acc(*b, &mut |s| add_into(s, dy));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((g, &d), &o) in s.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                });
                acc(*b, &mut |s| {
                    for ((g, &d), &o) in s.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |s| {
                for (g, &d) in s.iter_mut().zip(dy) {
                    *g += d * f;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| {
                for g in s.iter_mut() {
                    *g += dy[0];
                }
            }),
            Op::Crop { x, top, left } => {
                let (_, _, sh, sw) = self.value(*x).nchw().unwrap();
                let (_, _, h, w) = node.value.nchw().unwrap();
                acc(*x, &mut |s| {
                    for plane in 0..dy.len() / (h * w) {
                        for y in 0..h {
                            let src = &dy[(plane * h + y) * w..(plane * h + y + 1) * w];
                            let d0 = (plane * sh + top + y) * sw + left;
                            add_into(&mut s[d0..d0 + w], src);
                        }
                    }
                })
            }
            Op::Pad { x, pad } => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                acc(*x, &mut |s| {
                    for plane in 0..s.len() / (h * w) {
                        for y in 0..h {
                            let d0 = (plane * ph + y + pad) * pw + pad;
                            add_into(&mut s[(plane * h + y) * w..(plane * h + y + 1) * w], &dy[d0..d0 + w]);
                        }
                    }
                })
            }
            Op::SelectRow { x, row } => {
                let c = dy.len();
                acc(*x, &mut |s| add_into(&mut s[row * c..(row + 1) * c], dy));
            }
            Op::Mixture { inputs, weights } => {
                let wv = self.value(*weights).data();
                for (k, &v) in inputs.iter().enumerate() {
                    acc(v, &mut |s| {
                        for (g, &d) in s.iter_mut().zip(dy) {
                            *g += wv[k] * d;
                        }
                    });
                }
                acc(*weights, &mut |s| {
                    for (k, &v) in inputs.iter().enumerate() {
                        let dot: f64 = self
                            .value(v)
                            .data()
                            .iter()
                            .zip(dy)
                            .map(|(&a, &d)| (a * d) as f64)
                            .sum();
                        s[k] += dot as f32;
                    }
                });
            }
            Op::TotalVariation(x) => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let src = self.value(*x).data();
                let up = dy[0];
                acc(*x, &mut |s| {
                    for plane in 0..src.len() / (h * w) {
                        let base = plane * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let here = base + i * w + j;
                                if i + 1 < h {
                                    let d = 2.0 * up * (src[here + w] - src[here]);
                                    s[here + w] += d;
                                    s[here] -= d;
                                }
                                if j + 1 < w {
                                    let d = 2.0 * up * (src[here + 1] - src[here]);
                                    s[here + 1] += d;
                                    s[here] -= d;
                                }
                            }
                        }
                    }
                })
            }
            Op::SoftCrossEntropy { logits, grad_scale } => acc(*logits, &mut |s| {
                for (g, &v) in s.iter_mut().zip(grad_scale) {
                    *g += dy[0] * v;
                }
            }),
            Op::ChannelStatDistance { x, mean, dmean, dvar } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let nm = dmean.iter().map(|d| d * d).sum::<f64>().sqrt();
                let nv = dvar.iter().map(|d| d * d).sum::<f64>().sqrt();
                let src = self.value(*x).data();
                let up = dy[0] as f64;
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        // Subgradient 0 where a norm vanishes.
                        let gm = if nm > 0.0 { dmean[ch] / nm } else { 0.0 };
                        let gv = if nv > 0.0 { dvar[ch] / nv } else { 0.0 };
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                let g = gm / m + gv * 2.0 * (src[i] as f64 - mean[ch]) / m;
                                s[i] += (up * g) as f32;
                            }
                        }
                    }
                })
            }
        }
    }
}

fn soft_target_grad(log_probs: &[f32], targets: &[f32], n: usize) -> Vec<f32> {
    log_probs
        .iter()
        .zip(targets)
        .map(|(&l, &t)| (l.exp() - t) / n as f32)
        .collect()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-channel mean and biased variance of an NCHW tensor, accumulated in `f64`.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.nchw().expect("channel_moments needs NCHW");
    let hw = h * w;
    let m = (n * hw) as f64;
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            mean[ch] += data[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            var[ch] += data[off..off + hw]
                .iter()
                .map(|&v| (v as f64 - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub(crate) fn crop_nchw(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let (n, c, sh, sw) = x.nchw().expect("crop needs NCHW");
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let s0 = (plane * sh + top + y) * sw + left;
            out.extend_from_slice(&src[s0..s0 + w]);
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out)
}

/// Total variation of an NCHW tensor: squared forward differences at in-bounds indices.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    let (_, _, h, w) = x.nchw()?;
    let data = x.data();
    let mut total = 0.0f64;
    for plane in data.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j] as f64;
                if i + 1 < h {
                    total += (plane[(i + 1) * w + j] as f64 - v).powi(2);
                }
                if j + 1 < w {
                    total += (plane[i * w + j + 1] as f64 - v).powi(2);
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains("2 channels") && err.contains("expects 3"), "{err}");
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::ones(&[3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[4]));
        let a = tape.sum(x);
        let b = tape.sum(x);
        let l = tape.add(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3]));
        let y = tape.relu(x);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn tv_hand_example() {
        let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(total_variation(&x).unwrap(), 10.0);
        assert_eq!(total_variation(&Tensor::full(&[2, 3, 4, 5], 1.5)).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy_soft(x, &Tensor::full(&[2, 4], 0.25)).unwrap();
        assert!((tape.value(l).item() as f64 - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.cross_entropy_soft(x, &t(&[1, 2], &[0.6, 0.6])).is_err());
        assert!(tape.kl_divergence(x, &t(&[1, 2], &[1.5, -0.5])).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.kl_divergence(x, &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((tape.value(l).item() as f64 - 2f64.ln()).abs() < 1e-6);
        let logits = t(&[1, 3], &[0.3, -1.2, 2.0]);
        let p = Tensor::from_parts(vec![1, 3], softmax_rows(logits.data(), 3));
        let s = tape.constant(logits);
        let l = tape.kl_divergence(s, &p).unwrap();
        assert!(tape.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|i| i as f32 * 0.1 - 1.0).collect();
        let x = tape.constant(t(&[2, 3, 2, 2], &data));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, _) = tape.batchnorm2d(x, g, b, &[0.0; 3], &[1.0; 3], BnMode::Eval).unwrap();
        let scale = 1.0 / (1.0f32 + BN_EPS).sqrt();
        for (o, i) in tape.value(y).data().iter().zip(&data) {
            assert!((o - i * scale).abs() < 1e-7);
        }
    }

    #[test]
    fn batchnorm_constant_batch_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 2, 3, 3], 2.5));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batchnorm2d(x, g, b, &[0.0; 2], &[1.0; 2], BnMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batchnorm2d(x, g, b, &[0.0; 2], &[1.0; 2], BnMode::Train).is_err());
    }

    #[test]
    fn channel_stat_distance_hand_norm() {
        // Channel means [3, 4] against stored zeros; variances match.
        let mut tape = Tape::new();
        let mut data = vec![3.0, 3.0, 4.0, 4.0];
        data.extend([3.0, 3.0, 4.0, 4.0].iter().map(|v| v + 0.0));
        // Layout [n=2, c=2, 1, 2]: sample 0 channel 0 = [3,3], channel 1 = [4,4], same for sample 1.
        let x = tape.constant(t(&[2, 2, 1, 2], &data));
        let l = tape.channel_stat_distance(x, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-6);
    }
}
