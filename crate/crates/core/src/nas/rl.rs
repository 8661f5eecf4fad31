use rand::Rng as _;

use super::{sample_rows, score_rows, ArchDescriptor, SearchReport, SuperNet};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::tape::softmax_rows;

/// How the reward baseline tracks past rewards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineKind {
    /// `b ← decay·b + (1 − decay)·R`.
    Ema { decay: f64 },
    /// Mean of all rewards so far (`decay = 1/t`).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub value: Option<f64>,
    pub count: u64,
}

impl Baseline {
    pub fn new(kind: BaselineKind) -> Self {
        Baseline { kind, value: None, count: 0 }
    }

    /// Advantage of `reward` against the current baseline, then folds it in.
    /// The first reward has zero advantage.
    pub fn advantage(&mut self, reward: f64) -> f64 {
        let b = self.value.unwrap_or(reward);
        self.count += 1;
        self.value = Some(match (self.kind, self.value) {
            (_, None) => reward,
            (BaselineKind::Ema { decay }, Some(v)) => decay * v + (1.0 - decay) * reward,
            (BaselineKind::Mean, Some(v)) => v + (reward - v) / self.count as f64,
        });
        reward - b
    }
}

/// Independent categorical distribution per layer, `p = softmax(α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub alpha: Vec<Vec<f32>>,
}

impl Policy {
    pub fn uniform(num_layers: usize, num_choices: usize) -> Self {
        Policy {
            alpha: vec![vec![0.0; num_choices]; num_layers],
        }
    }

    pub fn probs(&self) -> Vec<Vec<f32>> {
        self.alpha.iter().map(|r| softmax_rows(r, r.len())).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> ArchDescriptor {
        ArchDescriptor(
            self.probs()
                .iter()
                .map(|p| {
                    let u: f32 = rng.random();
                    let mut acc = 0.0;
                    for (i, &pi) in p.iter().enumerate() {
                        acc += pi;
                        if u < acc {
                            return i;
                        }
                    }
                    p.len() - 1
                })
                .collect(),
        )
    }

    /// `∇_α log p(arch)`: one-hot of the sampled choice minus `softmax(α)`, per layer.
    pub fn grad_log_prob(&self, arch: &ArchDescriptor) -> Vec<Vec<f32>> {
        self.probs()
            .into_iter()
            .zip(&arch.0)
            .map(|(mut p, &c)| {
                p.iter_mut().for_each(|v| *v = -*v);
                p[c] += 1.0;
                p
            })
            .collect()
    }

    pub fn argmax(&self) -> ArchDescriptor {
        super::darts::derive_arch(&self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub baseline: BaselineKind,
    /// Validation rows scored per reward.
    pub batch_size: usize,
    /// Target multiply-accumulate count for reward shaping.
    pub flops_target: Option<u64>,
    pub seed: u64,
}

impl RlConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        RlConfig {
            steps,
            learning_rate: 0.5,
            baseline: BaselineKind::Ema { decay: 0.9 },
            batch_size: 64,
            flops_target: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlOutcome {
    pub policy: Policy,
    pub arch: ArchDescriptor,
    pub rewards: Vec<f64>,
    pub baselines: Vec<f64>,
    /// Largest per-step |Δα| entry.
    pub updates: Vec<f64>,
}

/// `acc · (target / flops)^w` with `w = 0.6` above the target and `1` otherwise.
pub fn shaped_reward(accuracy: f64, flops: u64, target: u64) -> f64 {
    let ratio = target as f64 / flops.max(1) as f64;
    let w = if flops > target { 0.6 } else { 1.0 };
    accuracy * ratio.powf(w)
}

/// REINFORCE on per-layer logits: sample a path, score it, move α by
/// `lr · (R − baseline) · ∇ log p(path)`.
pub fn reinforce<F>(num_layers: usize, num_choices: usize, cfg: &RlConfig, mut reward: F) -> Result<RlOutcome>
where
    F: FnMut(&ArchDescriptor, usize) -> Result<f64>,
{
    let mut policy = Policy::uniform(num_layers, num_choices);
    let mut baseline = Baseline::new(cfg.baseline);
    let mut rng = rng_for(cfg.seed, "nas/rl", 0);
    let mut out = RlOutcome {
        policy: policy.clone(),
        arch: policy.argmax(),
        rewards: Vec::with_capacity(cfg.steps),
        baselines: Vec::with_capacity(cfg.steps),
        updates: Vec::with_capacity(cfg.steps),
    };
    for step in 0..cfg.steps {
        let arch = policy.sample(&mut rng);
        let r = reward(&arch, step)?;
        if !r.is_finite() {
            return Err(Error::numerical(format!("reward {r} at step {step}")));
        }
        let adv = baseline.advantage(r);
        let g = policy.grad_log_prob(&arch);
        let mut biggest = 0.0f64;
        for (row, grow) in policy.alpha.iter_mut().zip(&g) {
            for (a, &gi) in row.iter_mut().zip(grow) {
                let d = cfg.learning_rate as f64 * adv * gi as f64;
                *a += d as f32;
                biggest = biggest.max(d.abs());
            }
        }
        if policy.alpha.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::numerical(format!("policy logits diverged at step {step}")));
        }
        out.rewards.push(r);
        out.baselines.push(baseline.value.unwrap_or(0.0));
        out.updates.push(biggest);
    }
    out.arch = policy.argmax();
    out.policy = policy;
    Ok(out)
}

/// Policy-gradient search with supernet path accuracy on a random validation
/// batch as reward, optionally shaped towards a MAC budget.
pub fn rl_search(net: &SuperNet, val: &LabeledDataset, cfg: &RlConfig, dataset_id: &str) -> Result<(RlOutcome, SearchReport)> {
    if val.is_empty() {
        return Err(Error::config("policy-gradient search needs a non-empty validation set"));
    }
    let ids = val.class_ids();
    let space = &net.space;
    let outcome = reinforce(space.num_layers(), space.num_choices(), cfg, |arch, step| {
        let mut rng = rng_for(cfg.seed, "nas/rl/batch", step as u64);
        let rows = sample_rows(val.len(), cfg.batch_size, &mut rng);
        let acc = score_rows(net, arch, val, &rows, &ids)?;
        Ok(match cfg.flops_target {
            Some(t) => shaped_reward(acc, space.macs(arch)?, t),
            None => acc,
        })
    })?;
    let report = SearchReport {
        strategy: "rl".into(),
        dataset_id: dataset_id.into(),
        arch: outcome.arch.clone(),
        search_val_accuracy: super::infer_path_accuracy(net, &outcome.arch, val)?,
        retrain_accuracy: None,
        seed: cfg.seed,
        steps: cfg.steps as u64,
        candidate_evaluations: cfg.steps as u64,
    };
    Ok((outcome, report))
}
