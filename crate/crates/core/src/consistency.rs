//! Rank agreement between architecture accuracies obtained with different
//! training sources.

use std::fmt;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::export::write_csv;
use crate::data::format::atomic_write;
use crate::data::{permutation, LabeledDataset, Labels};
use crate::error::{Error, Result};
use crate::nas::{infer_path_accuracy, retrain_arch, train_supernet, ArchDescriptor, SearchSpace};
use crate::rng::{derive_seed, rng_for};
use crate::train::{TargetKind, TrainConfig};

/// Spearman coefficient, or the explicit outcome for an all-tied input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rho {
    Value(f64),
    /// One of the lists has zero rank variance.
    Degenerate,
}

impl Rho {
    pub fn value(self) -> Option<f64> {
        match self {
            Rho::Value(v) => Some(v),
            Rho::Degenerate => None,
        }
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Value(v) => write!(f, "{v}"),
            Rho::Degenerate => f.write_str("degenerate"),
        }
    }
}

/// 1-based ranks with tied values sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Rho {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Rho::Degenerate;
    }
    Rho::Value((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<Rho> {
    if xs.len() != ys.len() {
        return Err(Error::config(format!("rank lists differ in length: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::config("rank correlation needs at least two pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::config("rank correlation inputs must be finite"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Two-sided permutation p-value `(1 + #{|ρ_perm| ≥ |ρ|}) / (1 + permutations)`.
pub fn permutation_p_value(xs: &[f64], ys: &[f64], permutations: usize, seed: u64) -> Result<Option<f64>> {
    let Rho::Value(obs) = spearman_rho(xs, ys)? else {
        return Ok(None);
    };
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mut rng = rng_for(seed, "consistency/permutation", 0);
    let mut extreme = 0usize;
    for _ in 0..permutations {
        let p = permutation(ry.len(), &mut rng);
        let shuffled: Vec<f64> = p.iter().map(|&i| ry[i]).collect();
        if let Rho::Value(r) = pearson(&rx, &shuffled) {
            if r.abs() >= obs.abs() - 1e-12 {
                extreme += 1;
            }
        }
    }
    Ok(Some((1 + extreme) as f64 / (1 + permutations) as f64))
}

/// Two-sided critical |ρ| at level `alpha` for `n` pairs (t approximation).
pub fn significance_threshold(n: usize, alpha: f64) -> f64 {
    let df = (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, df).expect("n > 2").inverse_cdf(1.0 - alpha / 2.0);
    t / (df + t * t).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyMode {
    /// Each architecture trained from scratch on every source.
    Retrain,
    /// One supernet per source; architectures scored by path inference.
    Supernet,
}

impl ConsistencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyMode::Retrain => "retrain",
            ConsistencyMode::Supernet => "supernet",
        }
    }
}

/// A named training source.
#[derive(Clone, Debug)]
pub struct Source {
    pub name: String,
    pub data: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub n_archs: usize,
    pub mode: ConsistencyMode,
    /// Training budget per architecture (retrain) or per supernet.
    pub train: TrainConfig,
    pub permutations: usize,
    pub parallelism: usize,
    /// Seeds the architecture sample and the training runs.
    pub seed: u64,
}

impl ConsistencyConfig {
    pub fn new(mode: ConsistencyMode, seed: u64) -> Self {
        let (n_archs, epochs) = match mode {
            ConsistencyMode::Retrain => (15, 20),
            ConsistencyMode::Supernet => (81, 20),
        };
        ConsistencyConfig {
            n_archs,
            mode,
            train: TrainConfig::new(epochs, TargetKind::Hard, seed),
            permutations: 1000,
            parallelism: 1,
            seed,
        }
    }
}

/// Accuracies of one architecture sample on a reference and another source.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub source_a: String,
    pub source_b: String,
    pub mode: ConsistencyMode,
    pub archs: Vec<ArchDescriptor>,
    pub acc_a: Vec<f64>,
    pub acc_b: Vec<f64>,
    pub rho: Rho,
    pub p_value: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
}

impl ConsistencyReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} vs {} ({}, n={}, epochs={}, seed={}): rho={} p={}",
            self.source_a,
            self.source_b,
            self.mode.as_str(),
            self.archs.len(),
            self.epochs,
            self.seed,
            self.rho,
            self.p_value.map_or("n/a".to_string(), |p| p.to_string())
        )
    }

    /// Writes `<stem>.csv` (arch, acc_a, acc_b), `<stem>.txt` (summary line)
    /// and `<stem>.svg` (scatter plot).
    pub fn write(&self, stem: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .archs
            .iter()
            .zip(self.acc_a.iter().zip(&self.acc_b))
            .map(|(a, (x, y))| vec![a.to_string(), x.to_string(), y.to_string()])
            .collect();
        let header = ["arch", &format!("acc_{}", self.source_a), &format!("acc_{}", self.source_b)];
        write_csv(&stem.with_extension("csv"), &header, &rows)?;
        atomic_write(&stem.with_extension("txt"), format!("{}\n", self.summary_line()).as_bytes())?;
        atomic_write(&stem.with_extension("svg"), self.scatter_svg().as_bytes())
    }

    pub fn scatter_svg(&self) -> String {
        let (size, pad) = (320.0, 40.0);
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
        };
        let (xa, xb) = span(&self.acc_a);
        let (ya, yb) = span(&self.acc_b);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\">\n<rect width=\"{w}\" height=\"{w}\" fill=\"white\"/>\n",
            w = size + 2.0 * pad
        );
        s += &format!(
            "<text x=\"{pad}\" y=\"20\" font-size=\"12\">rho = {}</text>\n<text x=\"{pad}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            self.rho,
            size + 2.0 * pad - 8.0,
            self.source_a
        );
        s += &format!(
            "<text x=\"4\" y=\"{pad}\" font-size=\"11\">{}</text>\n<rect x=\"{pad}\" y=\"{pad}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"black\"/>\n",
            self.source_b
        );
        for (x, y) in self.acc_a.iter().zip(&self.acc_b) {
            let cx = pad + (x - xa) / (xb - xa) * size;
            let cy = pad + size - (y - ya) / (yb - ya) * size;
            s += &format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"steelblue\"/>\n");
        }
        s + "</svg>\n"
    }
}

/// All accuracies of one consistency run.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRun {
    pub archs: Vec<ArchDescriptor>,
    /// `(source name, accuracy per architecture)` in source order.
    pub accuracies: Vec<(String, Vec<f64>)>,
    /// The first source against each of the others.
    pub reports: Vec<ConsistencyReport>,
}

fn target_for(ds: &LabeledDataset) -> TargetKind {
    match ds.labels {
        Labels::Hard(_) => TargetKind::Hard,
        Labels::Soft(_) => TargetKind::Soft,
    }
}

/// Scores the same architecture sample with every source and correlates each
/// source against the first (the real-data reference). Accuracy is always
/// measured on `eval`. When `partial` is given, per-source accuracies are
/// flushed there as each source finishes.
pub fn run_consistency(
    space: &SearchSpace,
    sources: &[Source],
    eval: &LabeledDataset,
    cfg: &ConsistencyConfig,
    partial: Option<&Path>,
) -> Result<ConsistencyRun> {
    if sources.len() < 2 {
        return Err(Error::config("consistency needs the reference source and at least one other"));
    }
    if cfg.n_archs < 3 {
        return Err(Error::config("consistency needs at least 3 architectures"));
    }
    let archs = space.sample_distinct(cfg.n_archs, cfg.seed)?;
    let mut accuracies = Vec::with_capacity(sources.len());
    for src in sources {
        let mut train = cfg.train.clone();
        train.target = target_for(&src.data);
        let accs = match cfg.mode {
            ConsistencyMode::Retrain => {
                let tasks: Vec<(usize, ArchDescriptor)> = archs.iter().cloned().enumerate().collect();
                crate::par::map(cfg.parallelism, tasks, |(i, a)| {
                    let mut t = train.clone();
                    t.seed = derive_seed(cfg.seed, "consistency/arch", i as u64);
                    retrain_arch(space, &a, &src.data, eval, &t).map(|(_, acc)| acc)
                })?
            }
            ConsistencyMode::Supernet => {
                train.seed = derive_seed(cfg.seed, "consistency/supernet", 0);
                let (net, _) = train_supernet(space, &src.data, &train)?;
                crate::par::map(cfg.parallelism, archs.clone(), |a| infer_path_accuracy(&net, &a, eval))?
            }
        };
        accuracies.push((src.name.clone(), accs));
        if let Some(path) = partial {
            write_accuracies(path, &archs, &accuracies)?;
        }
    }
    let (ref_name, ref_acc) = &accuracies[0];
    let reports = accuracies[1..]
        .iter()
        .map(|(name, acc)| {
            Ok(ConsistencyReport {
                source_a: ref_name.clone(),
                source_b: name.clone(),
                mode: cfg.mode,
                archs: archs.clone(),
                acc_a: ref_acc.clone(),
                acc_b: acc.clone(),
                rho: spearman_rho(ref_acc, acc)?,
                p_value: permutation_p_value(ref_acc, acc, cfg.permutations, cfg.seed)?,
                seed: cfg.seed,
                epochs: cfg.train.epochs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyRun {
        archs,
        accuracies,
        reports,
    })
}

/// One row per architecture, one column per finished source.
pub fn write_accuracies(path: &Path, archs: &[ArchDescriptor], accuracies: &[(String, Vec<f64>)]) -> Result<()> {
    let mut header = vec!["arch"];
    header.extend(accuracies.iter().map(|(n, _)| n.as_str()));
    let rows: Vec<Vec<String>> = archs
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut r = vec![a.to_string()];
            r.extend(accuracies.iter().map(|(_, v)| v[i].to_string()));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}
