//! SGD with momentum and Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Tensor) {
        match self.grad.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f32, momentum: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    /// Per-element update counts, only kept for masked updates.
    counts: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            slots: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.config.learning_rate = lr;
    }

    fn slot(&mut self, idx: usize, len: usize) -> &mut Slot {
        if self.slots.len() <= idx {
            self.slots.resize_with(idx + 1, Slot::default);
        }
        let s = &mut self.slots[idx];
        if s.m.len() != len {
            s.m = vec![0.0; len];
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                s.v = vec![0.0; len];
            }
        }
        s
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Moment buffers are keyed by position in `params`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        self.step_slots(params.into_iter().enumerate())
    }

    /// Like [`OptimizerState::step`] with explicit moment-buffer slots, for
    /// callers that update a changing subset of a fixed parameter set.
    pub fn step_slots<'a>(&mut self, params: impl IntoIterator<Item = (usize, &'a mut Param)>) -> Result<()> {
        let mut params: Vec<(usize, &mut Param)> = params.into_iter().collect();
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::config(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        for (i, p) in params.iter_mut() {
            let grad = p.grad.take().unwrap();
            let slot = self.slot(*i, p.value.len());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                update(&cfg, slot, j, w, g, t);
            }
        }
        Ok(())
    }

    /// Updates only the elements where `mask` is set; everything else, including
    /// moment buffers, is left untouched. Bias correction uses per-element counts.
    pub fn step_masked(&mut self, slot_idx: usize, value: &mut Tensor, grad: &Tensor, mask: &[bool]) -> Result<()> {
        if grad.shape() != value.shape() || mask.len() != value.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "value {:?}, grad {:?} and mask of {} elements disagree",
                    value.shape(),
                    grad.shape(),
                    mask.len()
                ),
            ));
        }
        self.step += 1;
        let cfg = self.config;
        let slot = self.slot(slot_idx, value.len());
        if slot.counts.len() != value.len() {
            slot.counts = vec![0; value.len()];
        }
        for (j, ((w, &g), &on)) in value.data_mut().iter_mut().zip(grad.data()).zip(mask).enumerate() {
            if on {
                slot.counts[j] += 1;
                let t = slot.counts[j] as u64;
                update(&cfg, slot, j, w, g, t);
            }
        }
        Ok(())
    }
}

fn update(cfg: &OptimizerConfig, slot: &mut Slot, j: usize, w: &mut f32, g: f32, t: u64) {
    let g = g + cfg.weight_decay * *w;
    match cfg.kind {
        OptimizerKind::Sgd { momentum } => {
            let buf = momentum * slot.m[j] + g;
            slot.m[j] = buf;
            *w -= cfg.learning_rate * buf;
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * g;
            slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * g * g;
            let mhat = slot.m[j] as f64 / (1.0 - (beta1 as f64).powi(t as i32));
            let vhat = slot.v[j] as f64 / (1.0 - (beta2 as f64).powi(t as i32));
            *w -= (cfg.learning_rate as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
        }
    }
}
