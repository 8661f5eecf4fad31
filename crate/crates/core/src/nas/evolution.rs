use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng as _;

use super::{infer_path_accuracy, ArchDescriptor, SuperNet};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    /// Fraction of each generation's offspring produced by crossover.
    pub crossover_frac: f64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 16,
            generations: 10,
            mutation_prob: 0.25,
            crossover_frac: 0.5,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::config("evolution population must be at least 4"));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) || !(0.0..=1.0).contains(&self.crossover_frac) {
            return Err(Error::config("mutation_prob and crossover_frac must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Candidates proposed over the whole run.
    pub fn budget(&self) -> usize {
        self.population + self.generations * (self.population - self.population / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionResult {
    pub best: ArchDescriptor,
    pub best_fitness: f64,
    /// Best-ever fitness after the initial population and after each generation.
    pub best_per_generation: Vec<f64>,
    /// Candidates proposed (equals [`EvolutionConfig::budget`]).
    pub candidates: usize,
    /// Distinct fitness evaluations after memoization.
    pub evaluations: usize,
}

struct Memo {
    table: HashMap<ArchDescriptor, (f64, usize)>,
}

impl Memo {
    fn get<F: FnMut(&ArchDescriptor) -> Result<f64>>(&mut self, a: &ArchDescriptor, f: &mut F) -> Result<(f64, usize)> {
        if let Some(&v) = self.table.get(a) {
            return Ok(v);
        }
        let fit = f(a)?;
        let v = (fit, self.table.len());
        self.table.insert(a.clone(), v);
        Ok(v)
    }

    /// Higher fitness first, then earlier discovery, then lexicographic order.
    fn rank(&self, a: &ArchDescriptor, b: &ArchDescriptor) -> Ordering {
        let (fa, da) = self.table[a];
        let (fb, db) = self.table[b];
        fb.total_cmp(&fa).then(da.cmp(&db)).then_with(|| a.cmp(b))
    }

    fn best(&self) -> (ArchDescriptor, f64) {
        let a = self
            .table
            .keys()
            .min_by(|a, b| self.rank(a, b))
            .expect("population is non-empty")
            .clone();
        let f = self.table[&a].0;
        (a, f)
    }
}

/// (μ+λ) evolution over `num_layers` genes with `num_choices` alleles each,
/// μ = half the population; `fitness` is memoized per descriptor.
pub fn evolve<F>(num_layers: usize, num_choices: usize, cfg: &EvolutionConfig, mut fitness: F) -> Result<EvolutionResult>
where
    F: FnMut(&ArchDescriptor) -> Result<f64>,
{
    cfg.validate()?;
    if num_layers == 0 || num_choices == 0 {
        return Err(Error::config("evolution needs at least one layer and one choice"));
    }
    let mut rng = rng_for(cfg.seed, "nas/evolution", 0);
    let random = |rng: &mut crate::rng::Rng| ArchDescriptor((0..num_layers).map(|_| rng.random_range(0..num_choices)).collect());
    let mut memo = Memo { table: HashMap::new() };
    let mut population: Vec<ArchDescriptor> = (0..cfg.population).map(|_| random(&mut rng)).collect();
    let mut candidates = population.len();
    for a in &population {
        memo.get(a, &mut fitness)?;
    }
    let mut best_per_generation = vec![memo.best().1];
    let mu = cfg.population / 2;
    let lambda = cfg.population - mu;
    let n_cross = ((lambda as f64) * cfg.crossover_frac).round() as usize;
    for _ in 0..cfg.generations {
        population.sort_by(|a, b| memo.rank(a, b));
        population.dedup();
        population.truncate(mu);
        let parents = population.clone();
        for i in 0..lambda {
            let child = if i < n_cross && num_layers > 1 {
                let a = &parents[rng.random_range(0..parents.len())];
                let b = &parents[rng.random_range(0..parents.len())];
                let cut = rng.random_range(1..num_layers);
                ArchDescriptor(a.0[..cut].iter().chain(&b.0[cut..]).copied().collect())
            } else {
                let p = &parents[rng.random_range(0..parents.len())];
                ArchDescriptor(
                    p.0.iter()
                        .map(|&g| if rng.random_bool(cfg.mutation_prob) { rng.random_range(0..num_choices) } else { g })
                        .collect(),
                )
            };
            memo.get(&child, &mut fitness)?;
            population.push(child);
            candidates += 1;
        }
        best_per_generation.push(memo.best().1);
    }
    let (best, best_fitness) = memo.best();
    Ok(EvolutionResult {
        best,
        best_fitness,
        best_per_generation,
        candidates,
        evaluations: memo.table.len(),
    })
}

/// Evolution with supernet path accuracy on `val` as fitness.
pub fn evolutionary_search(net: &SuperNet, val: &LabeledDataset, cfg: &EvolutionConfig) -> Result<EvolutionResult> {
    if val.is_empty() {
        return Err(Error::config("evolution needs a non-empty validation set"));
    }
    evolve(net.space.num_layers(), net.space.num_choices(), cfg, |a| infer_path_accuracy(net, a, val))
}
