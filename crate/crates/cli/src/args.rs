use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dfnas", version, about = "Data-free neural architecture search workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier on real data and save its checkpoint.
    #[command(args_override_self = true)]
    TrainTeacher(TrainTeacherArgs),
    /// Invert a teacher checkpoint into a soft-labeled dataset.
    #[command(args_override_self = true)]
    Synthesize(SynthesizeArgs),
    /// Run an architecture search on a dataset.
    #[command(args_override_self = true)]
    Search(SearchArgs),
    /// Correlate architecture rankings across training sources.
    #[command(args_override_self = true)]
    Consistency(ConsistencyArgs),
    /// Distill fresh students from soft-labeled datasets.
    #[command(args_override_self = true)]
    Distill(DistillArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher(_) => "train-teacher",
            Command::Synthesize(_) => "synthesize",
            Command::Search(_) => "search",
            Command::Consistency(_) => "consistency",
            Command::Distill(_) => "distill",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::TrainTeacher(a) => &a.common,
            Command::Synthesize(a) => &a.common,
            Command::Search(a) => &a.common,
            Command::Consistency(a) => &a.common,
            Command::Distill(a) => &a.common,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value file supplying defaults for any flag of this subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output root; defaults to $DFNAS_OUT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory under the output root; defaults to the subcommand name.
    #[arg(long)]
    pub name: Option<String>,
    /// Worker threads for independent tasks. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Procedurally rendered shapes.
    Shapes,
    /// Dataset files in the native format.
    Dfds,
    /// CIFAR-10 binary batches.
    Cifar10,
    /// IDX image files (labels via --train-labels / --val-labels).
    Idx,
}

#[derive(Args, Debug, Clone)]
pub struct RealData {
    #[arg(long, value_enum, default_value_t = DataKind::Shapes)]
    pub data: DataKind,
    #[arg(long, default_value_t = 50)]
    pub real_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub real_val_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long)]
    pub val_file: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub real: RealData,
    #[arg(long, default_value = "teacher")]
    pub arch: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
}

#[derive(Args, Debug, Clone)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 40)]
    pub canvas: usize,
    #[arg(long, default_value_t = 300)]
    pub inner_iters: usize,
    #[arg(long, default_value_t = 3)]
    pub outer_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_tv: f32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_feat: f32,
    #[arg(long, default_value_t = 1.0)]
    pub init_std: f32,
    /// Keep one-hot targets in every outer step.
    #[arg(long)]
    pub no_calibration: bool,
    /// Optimize the whole canvas each step (canvas shrinks to the crop size).
    #[arg(long)]
    pub whole_image: bool,
    /// Emit the Gaussian-noise control dataset instead of synthesizing.
    #[arg(long)]
    pub noise: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Spos,
    Darts,
    Rl,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub real: RealData,
    #[arg(long, value_enum, default_value_t = Strategy::Spos)]
    pub strategy: Strategy,
    /// Search dataset file; the real training split when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub supernet_epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub population: usize,
    #[arg(long, default_value_t = 10)]
    pub generations: usize,
    #[arg(long, default_value_t = 0.25)]
    pub mutation_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    pub crossover_frac: f64,
    #[arg(long, default_value_t = 10)]
    pub darts_epochs: usize,
    #[arg(long, default_value_t = 300)]
    pub rl_steps: usize,
    /// MAC budget for reward shaping in policy-gradient search.
    #[arg(long)]
    pub flops_target: Option<u64>,
    /// Stand-alone retraining of the winner on real data; 0 skips it.
    #[arg(long, default_value_t = 20)]
    pub retrain_epochs: usize,
    /// Replace one choice per layer with a zero block.
    #[arg(long)]
    pub rigged_zero: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Retrain,
    Supernet,
}

#[derive(Args, Debug, Clone)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub real: RealData,
    /// Dataset files compared against the real training split.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sources: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Retrain)]
    pub mode: Mode,
    #[arg(long)]
    pub n_archs: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
}

#[derive(Args, Debug, Clone)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub real: RealData,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Soft-labeled dataset files, one student per file and seed.
    #[arg(long, value_delimiter = ',', required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, default_value = "student")]
    pub student: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    /// Students per dataset, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
}
