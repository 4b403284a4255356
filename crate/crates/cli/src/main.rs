//! `cvt`: generate synthetic data, train, evaluate and run ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cvt_core::experiment::{ablation_csv, run_ablation, Manifest};
use cvt_core::io::{
    csv_table, format_g, format_opt, read_checkpoint, read_dataset, write_checkpoint, write_dataset, ExperimentConfig,
};
use cvt_core::metrics::EvalScope;
use cvt_core::synth::{ambiguity_rate, generate_dataset};
use cvt_core::trainer::{EpochLog, Trainer};
use cvt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cvt", version, about = "Temporal cost-volume occupancy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes `checkpoint.bin` and `train_log.csv` under `--out`.
    Train {
        /// Training settings; defaults to the config embedded in the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        /// A checkpoint file or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per sweep value and seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `frame_count=1,3,7`, `frame_interval=...`, `cvt_supervision` or `none`.
        #[arg(long, default_value = "none")]
        sweep: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seed: Vec<u64>,
        /// Output directory for `ablation.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<ExperimentConfig> {
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<cvt_core::io::dataset::DatasetFile> {
    if !path.is_file() {
        return Err(Error::Usage(format!("dataset {} does not exist", path.display())));
    }
    read_dataset(path)
}

/// Training settings must describe the same data the container holds.
fn check_compatible(cfg: &ExperimentConfig, data: &ExperimentConfig) -> Result<()> {
    let (a, b) = (&cfg.scene, &data.scene);
    let checks = [
        ("grid_height", a.grid.height == b.grid.height),
        ("grid_width", a.grid.width == b.grid.width),
        ("grid_depth", a.grid.depth == b.grid.depth),
        ("voxel_size", a.grid.voxel_size == b.grid.voxel_size),
        ("frame_count", a.frame_count == b.frame_count),
        ("frame_interval", a.frame_interval == b.frame_interval),
        ("channels", a.channels == b.channels),
        ("classes", a.class_set.len() == b.class_set.len()),
    ];
    for (key, ok) in checks {
        if !ok {
            return Err(Error::Config {
                key: key.to_string(),
                message: "does not match the dataset".into(),
            });
        }
    }
    Ok(())
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = with_seed(load_config(config)?, seed)?;
    let data = generate_dataset(&cfg.scene, cfg.train_samples, cfg.eval_samples)?;
    write_dataset(out, &cfg, &data).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot write {}: {io}", out.display())),
        e => e,
    })?;
    let rates: Vec<f64> = data.train.iter().chain(&data.eval).map(ambiguity_rate).collect();
    let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    println!("config_hash={}", cfg.hash());
    println!("samples train={} eval={} frames={}", data.train.len(), data.eval.len(), cfg.scene.frame_count);
    println!("ambiguity_rate mean={}", format_g(mean));
    Ok(())
}

fn log_csv(hash: &str, log: &[EpochLog]) -> String {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format_g(e.loss),
                format_g(e.occ_loss),
                format_g(e.cvt_term),
                format_opt(e.train_miou),
                format_opt(e.eval_miou),
            ]
        })
        .collect();
    csv_table(hash, &["epoch", "loss", "occ_loss", "cvt_term", "train_miou", "eval_miou"], &rows)
}

fn cmd_train(config: Option<&Path>, dataset: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let file = load_dataset(dataset)?;
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None => file.config.clone(),
    };
    let cfg = with_seed(cfg, seed)?;
    check_compatible(&cfg, &file.config)?;
    fs::create_dir_all(out).map_err(|e| Error::Usage(format!("cannot create {}: {e}", out.display())))?;
    let data = &file.dataset;
    let classes = cfg.scene.class_set.len();
    let mut trainer = Trainer::new(&cfg.train, &data.train, &data.eval, classes)?;
    let result: Result<()> = (|| {
        while !trainer.finished() {
            trainer.run_epoch()?;
        }
        Ok(())
    })();
    let hash = cfg.hash();
    write_out(&out.join("train_log.csv"), log_csv(&hash, &trainer.log).as_bytes())?;
    result?;
    write_checkpoint(&out.join("checkpoint.bin"), &cfg, &trainer.checkpoint)?;
    if let Some(last) = trainer.log.last() {
        println!(
            "epoch={} loss={} train_miou={} eval_miou={}",
            last.epoch,
            format_g(last.loss),
            format_opt(last.train_miou),
            format_opt(last.eval_miou)
        );
    }
    println!("checkpoint {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let path = if checkpoint.is_dir() { checkpoint.join("checkpoint.bin") } else { checkpoint.to_path_buf() };
    if !path.is_file() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = read_checkpoint(&path)?;
    let file = load_dataset(dataset)?;
    check_compatible(&ckpt.config, &file.config)?;
    let samples = match split {
        SplitArg::Train => &file.dataset.train,
        SplitArg::Eval => &file.dataset.eval,
    };
    if samples.is_empty() {
        return Err(Error::Usage("selected split is empty".into()));
    }
    let cfg = &ckpt.config;
    let scope = EvalScope {
        grid: cfg.scene.grid,
        classes: cfg.scene.class_set.len(),
        excluded: cfg.train.excluded_classes.clone(),
    };
    let report = ckpt.checkpoint.model.evaluate(samples, &scope)?;
    let rows: Vec<Vec<String>> = report
        .rows(&cfg.scene.class_set.names)
        .into_iter()
        .map(|(section, name, v)| {
            let integral = section == "voxel_count" || name == "samples";
            let value = match v {
                Some(x) if integral => format!("{}", x as u64),
                v => format_opt(v),
            };
            vec![section, name, value]
        })
        .collect();
    let csv = csv_table(&cfg.hash(), &["section", "name", "value"], &rows);
    match out {
        Some(p) => {
            write_out(p, csv.as_bytes())?;
            println!("miou={} nonfree_iou={}", format_opt(report.miou), format_opt(report.nonfree_iou));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, sweep: &str, seeds: Vec<u64>, out: &Path, jobs: usize) -> Result<()> {
    let base = load_config(config)?;
    let (axis, values) = Manifest::parse_sweep(sweep)?;
    let manifest = Manifest {
        base,
        seeds,
        axis,
        values,
        jobs,
    };
    manifest.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::Usage(format!("cannot create {}: {e}", out.display())))?;
    let (rows, _) = run_ablation(&manifest)?;
    let csv = ablation_csv(axis, &manifest.base.hash(), &rows);
    write_out(&out.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => cmd_train(config.as_deref(), &dataset, &out, seed),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => cmd_eval(&checkpoint, &dataset, split, out.as_deref()),
        Command::Ablate {
            config,
            sweep,
            seed,
            out,
            jobs,
        } => cmd_ablate(config.as_deref(), &sweep, seed, &out, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
