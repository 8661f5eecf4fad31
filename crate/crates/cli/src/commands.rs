use std::path::{Path, PathBuf};

use dfnas_core::consistency::{run_consistency, ConsistencyConfig, ConsistencyMode, Source};
use dfnas_core::data::export::{export_image_grid, write_csv};
use dfnas_core::data::format::{atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use dfnas_core::data::{
    generate_noise_dataset, generate_shapes, load_standard_binary, BinaryFormat, LabeledDataset, Labels, ShapesSpec, Split,
};
use dfnas_core::nas::{
    darts_search, retrain_arch, rl_search, spos_search, train_supernet, write_reports, DartsConfig, EvolutionConfig,
    RlConfig, SearchReport, SearchSpace,
};
use dfnas_core::synthesis::{build_dataset, SynthesisConfig};
use dfnas_core::train::train_classifier;
use dfnas_core::transfer::{distill, write_transfer_csv, TransferConfig, TransferRow};
use dfnas_core::{Architecture, Model, ModelCheckpoint, OptimizerConfig, TargetKind, TrainConfig};

use crate::args::{
    Command, ConsistencyArgs, DataKind, DistillArgs, Mode, RealData, SearchArgs, Strategy, SynthesizeArgs, TrainTeacherArgs,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn existing(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| usage(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(usage(format!("{flag}: no such file: {}", p.display())));
    }
    Ok(p)
}

fn output_dir(cmd: &Command) -> Result<PathBuf> {
    let common = cmd.common();
    let root = common
        .out
        .clone()
        .or_else(|| std::env::var_os("DFNAS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(common.name.as_deref().unwrap_or(cmd.name()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Core(dfnas_core::Error::Io { path: dir.clone(), source: e }))?;
    Ok(dir)
}

/// Runs one subcommand; returns the run directory.
pub fn run(cmd: &Command, echo: &str) -> Result<PathBuf> {
    if cmd.common().parallelism == 0 {
        return Err(usage("--parallelism must be at least 1"));
    }
    let dir = output_dir(cmd)?;
    atomic_write(&dir.join("config.txt"), echo.as_bytes())?;
    match cmd {
        Command::TrainTeacher(a) => train_teacher(a, &dir)?,
        Command::Synthesize(a) => synthesize(a, &dir)?,
        Command::Search(a) => search(a, &dir)?,
        Command::Consistency(a) => consistency(a, &dir)?,
        Command::Distill(a) => distill_cmd(a, &dir)?,
    }
    Ok(dir)
}

fn load_real(r: &RealData) -> Result<(LabeledDataset, LabeledDataset)> {
    let load = |flag: &str, path: &Option<PathBuf>, labels_flag: &str, labels: &Option<PathBuf>, split: Split| -> Result<LabeledDataset> {
        let p = existing(path, flag)?;
        Ok(match r.data {
            DataKind::Shapes => unreachable!(),
            DataKind::Dfds => load_dataset(&p)?,
            DataKind::Cifar10 => load_standard_binary(&p, &BinaryFormat::Cifar10, split)?,
            DataKind::Idx => {
                let labels = existing(labels, labels_flag)?;
                load_standard_binary(&p, &BinaryFormat::Idx { labels }, split)?
            }
        })
    };
    match r.data {
        DataKind::Shapes => {
            let spec = ShapesSpec::default();
            Ok((
                generate_shapes(&spec, r.real_per_class, r.data_seed, Split::Train)?,
                generate_shapes(&spec, r.real_val_per_class, r.data_seed, Split::Val)?,
            ))
        }
        _ => Ok((
            load("--train-file", &r.train_file, "--train-labels", &r.train_labels, Split::Train)?,
            load("--val-file", &r.val_file, "--val-labels", &r.val_labels, Split::Val)?,
        )),
    }
}

fn load_teacher(path: &Option<PathBuf>) -> Result<Model> {
    Ok(load_checkpoint(&existing(path, "--teacher")?)?.model)
}

fn target_for(ds: &LabeledDataset) -> TargetKind {
    match ds.labels {
        Labels::Hard(_) => TargetKind::Hard,
        Labels::Soft(_) => TargetKind::Soft,
    }
}

fn stem_name(p: &Path) -> String {
    p.file_stem().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
}

fn train_teacher(a: &TrainTeacherArgs, dir: &Path) -> Result<()> {
    let (train, val) = load_real(&a.real)?;
    let arch = Architecture::registered(&a.arch, train.num_classes)?;
    let mut cfg = TrainConfig::new(a.epochs, TargetKind::Hard, a.common.seed);
    cfg.batch_size = a.batch_size;
    cfg.optimizer = OptimizerConfig::sgd(a.lr, 0.9).with_weight_decay(5e-4);
    let model = Model::build(&arch, a.common.seed)?;
    let ck: ModelCheckpoint = train_classifier(model, &train, Some(&val), &cfg, "real")?;
    save_checkpoint(&ck, &dir.join("teacher.dfnc"))?;
    let rows: Vec<Vec<String>> = ck
        .meta
        .history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.train_accuracy.to_string(),
                r.val_accuracy.map_or(String::new(), |v| v.to_string()),
            ]
        })
        .collect();
    write_csv(&dir.join("curve.csv"), &["epoch", "loss", "train_acc", "val_acc"], &rows)?;
    let summary = format!(
        "train_accuracy = {}\nval_accuracy = {}\n",
        ck.meta.final_train_accuracy,
        ck.meta.final_val_accuracy.unwrap_or(f64::NAN)
    );
    atomic_write(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(())
}

fn preview(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    let k = ds.len().min(16);
    let cols = k.min(4);
    export_image_grid(&ds.images, k / cols, cols, &dir.join("preview.ppm"))?;
    Ok(())
}

fn synthesize(a: &SynthesizeArgs, dir: &Path) -> Result<()> {
    let teacher = load_teacher(&a.teacher)?;
    let crop = teacher.input_hw();
    let canvas = if a.whole_image { crop } else { (a.canvas, a.canvas) };
    let ds = if a.noise {
        let n = a.per_class * teacher.num_classes();
        if n == 0 {
            return Err(usage("--per-class must be at least 1"));
        }
        generate_noise_dataset(&teacher, (3, canvas.0, canvas.1), n, a.common.seed)?
    } else {
        let cfg = SynthesisConfig {
            batch_size: a.batch_size,
            canvas_hw: canvas,
            crop_hw: crop,
            inner_iters: a.inner_iters,
            outer_iters: a.outer_iters,
            learning_rate: a.lr,
            lambda_tv: a.lambda_tv,
            lambda_feat: a.lambda_feat,
            init_noise_std: a.init_std,
            calibrate: !a.no_calibration,
            seed: a.common.seed,
            ..SynthesisConfig::default()
        };
        let syn = build_dataset(&teacher, &cfg, a.per_class, a.common.parallelism)?;
        let mut rows = Vec::new();
        for (batch, outer, traj) in &syn.trajectories {
            for (step, l) in traj.iter().enumerate() {
                rows.push(vec![
                    batch.to_string(),
                    outer.to_string(),
                    step.to_string(),
                    l.ce.to_string(),
                    l.tv.to_string(),
                    l.feat.to_string(),
                    l.total.to_string(),
                ]);
            }
        }
        write_csv(&dir.join("losses.csv"), &["batch", "outer", "step", "ce", "tv", "feat", "total"], &rows)?;
        syn.dataset
    };
    save_dataset(&ds, &dir.join("dataset.dfds"))?;
    preview(&ds, dir)
}

fn search(a: &SearchArgs, dir: &Path) -> Result<()> {
    let (real_train, real_val) = load_real(&a.real)?;
    let (data, id) = match &a.dataset {
        Some(_) => {
            let p = existing(&a.dataset, "--dataset")?;
            (load_dataset(&p)?, stem_name(&p))
        }
        None => (real_train.clone(), "real".to_string()),
    };
    let space = if a.rigged_zero {
        SearchSpace::rigged_zero(data.num_classes)
    } else {
        SearchSpace::desk(data.num_classes)
    };
    let (search_train, search_val) = data.split_halves();
    let seed = a.common.seed;
    let mut supernet_cfg = TrainConfig::new(a.supernet_epochs, target_for(&data), seed);
    supernet_cfg.batch_size = 32;
    let mut alpha_rows = Vec::new();
    let mut report: SearchReport = match a.strategy {
        Strategy::Spos => {
            let evo = EvolutionConfig {
                population: a.population,
                generations: a.generations,
                mutation_prob: a.mutation_prob,
                crossover_frac: a.crossover_frac,
                seed,
            };
            spos_search(&space, &search_train, &search_val, &supernet_cfg, &evo, &id)?.1
        }
        Strategy::Darts => {
            let mut cfg = DartsConfig::new(a.darts_epochs, seed);
            cfg.weights.target = target_for(&data);
            let out = darts_search(&space, &search_train, &search_val, &cfg, &id)?;
            alpha_rows = out.alpha.clone();
            out.report
        }
        Strategy::Rl => {
            let (net, _) = train_supernet(&space, &search_train, &supernet_cfg)?;
            let mut cfg = RlConfig::new(a.rl_steps, seed);
            cfg.flops_target = a.flops_target;
            let (out, report) = rl_search(&net, &search_val, &cfg, &id)?;
            alpha_rows = out.policy.alpha.clone();
            report
        }
    };
    if a.retrain_epochs > 0 {
        let cfg = TrainConfig::new(a.retrain_epochs, TargetKind::Hard, seed);
        report.retrain_accuracy = Some(retrain_arch(&space, &report.arch, &real_train, &real_val, &cfg)?.1);
    }
    write_reports(&dir.join("report"), &[report])?;
    if !alpha_rows.is_empty() {
        let rows: Vec<Vec<String>> = alpha_rows
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                let probs = dfnas_core::tape::softmax_rows(row, row.len());
                row.iter()
                    .zip(probs)
                    .enumerate()
                    .map(move |(k, (v, p))| vec![l.to_string(), k.to_string(), v.to_string(), p.to_string()])
                    .collect::<Vec<_>>()
            })
            .collect();
        write_csv(&dir.join("alpha.csv"), &["layer", "choice", "alpha", "prob"], &rows)?;
    }
    Ok(())
}

fn consistency(a: &ConsistencyArgs, dir: &Path) -> Result<()> {
    let (real_train, real_val) = load_real(&a.real)?;
    let mut sources = vec![Source {
        name: "real".into(),
        data: real_train.clone(),
    }];
    for (i, p) in a.sources.iter().enumerate() {
        let p = existing(&Some(p.clone()), "--sources")?;
        let mut name = stem_name(&p);
        if sources.iter().any(|s| s.name == name) {
            name = format!("{name}{i}");
        }
        sources.push(Source {
            name,
            data: load_dataset(&p)?,
        });
    }
    let mode = match a.mode {
        Mode::Retrain => ConsistencyMode::Retrain,
        Mode::Supernet => ConsistencyMode::Supernet,
    };
    let mut cfg = ConsistencyConfig::new(mode, a.common.seed);
    if let Some(n) = a.n_archs {
        cfg.n_archs = n;
    }
    cfg.train.epochs = a.epochs;
    cfg.permutations = a.permutations;
    cfg.parallelism = a.common.parallelism;
    let space = SearchSpace::desk(real_train.num_classes);
    let run = run_consistency(&space, &sources, &real_val, &cfg, Some(&dir.join("accuracies.csv")))?;
    let mut summary = String::new();
    for r in &run.reports {
        r.write(&dir.join(format!("{}_vs_{}", r.source_a, r.source_b)))?;
        summary += &r.summary_line();
        summary.push('\n');
    }
    atomic_write(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(())
}

fn distill_cmd(a: &DistillArgs, dir: &Path) -> Result<()> {
    let teacher = load_teacher(&a.teacher)?;
    let (_, real_val) = load_real(&a.real)?;
    let mut tasks = Vec::new();
    for p in &a.datasets {
        let p = existing(&Some(p.clone()), "--datasets")?;
        let ds = load_dataset(&p)?;
        let id = stem_name(&p);
        for r in 0..a.repeats {
            tasks.push((id.clone(), ds.clone(), a.common.seed + r));
        }
    }
    let results = dfnas_core::par::map(a.common.parallelism, tasks, |(id, ds, seed)| {
        let mut cfg = TransferConfig::new(&id, a.epochs, seed);
        cfg.student = a.student.clone();
        cfg.train.temperature = a.temperature;
        distill(&teacher, &ds, &real_val, &cfg).map(|r| (id, seed, r))
    })?;
    let mut rows = Vec::new();
    for (id, seed, r) in results {
        save_checkpoint(&r.student, &dir.join(format!("student_{id}_{seed}.dfnc")))?;
        rows.push(TransferRow {
            dataset_id: id,
            seed,
            epochs: a.epochs,
            real_val_accuracy: r.real_val_accuracy,
        });
    }
    write_transfer_csv(&dir.join("transfer.csv"), &rows)?;
    Ok(())
}
