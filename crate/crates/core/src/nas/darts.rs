use super::{alpha_tensor, softmax_weights, ArchDescriptor, SearchReport, SearchSpace, SuperNet};
use crate::data::{permutation, LabeledDataset};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState, Param};
use crate::rng::rng_for;
use crate::tape::{softmax_rows, BnMode, Tape};
use crate::train::{apply_loss, batch_inputs, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DartsConfig {
    /// Weight-step settings (epochs, batch size, optimizer, loss, seed).
    pub weights: TrainConfig,
    /// Adam on the architecture logits.
    pub alpha_optimizer: OptimizerConfig,
}

impl DartsConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        let mut weights = TrainConfig::new(epochs, crate::train::TargetKind::Soft, seed);
        weights.optimizer = OptimizerConfig::sgd(0.05, 0.9).with_weight_decay(3e-4);
        DartsConfig {
            weights,
            alpha_optimizer: OptimizerConfig::adam(0.01).with_weight_decay(1e-3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DartsOutcome {
    pub supernet: SuperNet,
    /// Final architecture logits, one row per layer.
    pub alpha: Vec<Vec<f32>>,
    pub arch: ArchDescriptor,
    /// `softmax(α)` after every architecture step.
    pub weight_history: Vec<Vec<Vec<f32>>>,
    pub steps: u64,
    pub report: SearchReport,
}

/// Per-layer argmax of the architecture logits; ties go to the lower index.
pub fn derive_arch(alpha: &[Vec<f32>]) -> ArchDescriptor {
    ArchDescriptor(
        alpha
            .iter()
            .map(|row| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b }))
            .collect(),
    )
}

/// First-order differentiable search: alternating weight steps on `train`
/// (α frozen) and architecture steps on `val` (weights frozen).
pub fn darts_search(space: &SearchSpace, train: &LabeledDataset, val: &LabeledDataset, cfg: &DartsConfig, dataset_id: &str) -> Result<DartsOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("differentiable search needs non-empty train and validation halves"));
    }
    let wc = &cfg.weights;
    let bs = wc.batch_size.max(1);
    let mut net = SuperNet::build(space, wc.seed)?;
    let hw = (space.input.1, space.input.2);
    let (l, k) = (space.num_layers(), space.num_choices());
    let mut alpha: Vec<Param> = (0..l)
        .map(|i| Param::new(format!("alpha{i}"), alpha_tensor(&vec![0.0; k])))
        .collect();
    let mut w_opt = OptimizerState::new(wc.optimizer);
    let mut a_opt = OptimizerState::new(cfg.alpha_optimizer);
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = (steps_per_epoch * wc.epochs).max(1);
    let mut weight_history = Vec::with_capacity(total);
    let mut step = 0u64;
    for epoch in 0..wc.epochs {
        let mut rng = rng_for(wc.seed, "darts/epoch", epoch as u64);
        let order = permutation(train.len(), &mut rng);
        let val_order = permutation(val.len(), &mut rng);
        for (i, rows) in order.chunks(bs).enumerate() {
            if wc.cosine {
                let lr = wc.optimizer.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos());
                w_opt.set_learning_rate(lr);
            }
            // weight step, α frozen
            let x = batch_inputs(train, rows, hw, Some(&mut rng))?;
            let targets = train.target_rows(rows);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let ws = alpha
                .iter()
                .map(|a| {
                    let v = tape.constant(a.value.clone());
                    softmax_weights(&mut tape, v)
                })
                .collect::<Result<Vec<_>>>()?;
            let fwd = net.forward_mixture(&mut tape, xv, &ws, BnMode::Train, true)?;
            let loss = apply_loss(&mut tape, fwd.logits, &targets, wc)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numerical(format!("weight loss became {lv} at step {step}")));
            }
            let grads = tape.backward(loss)?;
            net.apply_step(&fwd, &grads, &mut w_opt)?;

            // architecture step, weights frozen
            let vrows: Vec<usize> = (0..bs).map(|j| val_order[(i * bs + j) % val.len()]).collect();
            let x = batch_inputs(val, &vrows, hw, Some(&mut rng))?;
            let targets = val.target_rows(&vrows);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let avars: Vec<_> = alpha.iter().map(|a| tape.leaf(a.value.clone())).collect();
            let ws = avars
                .iter()
                .map(|&v| softmax_weights(&mut tape, v))
                .collect::<Result<Vec<_>>>()?;
            let fwd = net.forward_mixture(&mut tape, xv, &ws, BnMode::Train, false)?;
            let loss = apply_loss(&mut tape, fwd.logits, &targets, wc)?;
            let mut grads = tape.backward(loss)?;
            for (p, &v) in alpha.iter_mut().zip(&avars) {
                let g = grads.take(v).expect("alpha is a leaf");
                p.accumulate(&g);
            }
            a_opt.step(alpha.iter_mut())?;
            if alpha.iter().any(|a| !a.value.all_finite()) {
                return Err(Error::numerical(format!("architecture logits became non-finite at step {step}")));
            }
            weight_history.push(alpha.iter().map(|a| softmax_rows(a.value.data(), k)).collect());
            step += 1;
        }
    }
    let alpha: Vec<Vec<f32>> = alpha.into_iter().map(|p| p.value.into_data()).collect();
    let arch = derive_arch(&alpha);
    let search_val_accuracy = super::infer_path_accuracy(&net, &arch, val)?;
    let report = SearchReport {
        strategy: "darts".into(),
        dataset_id: dataset_id.into(),
        arch: arch.clone(),
        search_val_accuracy,
        retrain_accuracy: None,
        seed: wc.seed,
        steps: step,
        candidate_evaluations: 1,
    };
    Ok(DartsOutcome {
        supernet: net,
        alpha,
        arch,
        weight_history,
        steps: step,
        report,
    })
}
