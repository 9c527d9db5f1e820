use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msirn::ablate::{ablate, sweep_k};
use msirn::data::{load_manifest, DatasetManifest, Layout};
use msirn::metrics::{evaluate_directory, evaluate_manifest, MetricConfig};
use msirn::model::Msirn;
use msirn::predict::predict_manifest;
use msirn::synth::{write_dataset, SynthSpec};
use msirn::train::{Trainer, CHECKPOINT_DIR};
use msirn::{Ablation, Error, Result, RunConfig};

/// RGB-D salient object detection: training, inference, evaluation and ablations.
#[derive(Parser)]
#[command(name = "msirn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Write saliency PNGs for every sample of a dataset.
    Predict {
        /// Checkpoint directory, or a training output directory holding one.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional run config; its model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mask directory.
        #[arg(long, conflicts_with = "data")]
        gt: Option<PathBuf>,
        /// Dataset root or manifest whose ground truth to use.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        beta_sq: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Train the full model and single-component ablations, then tabulate.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        /// Evaluation datasets (roots or manifests); repeatable.
        #[arg(long = "eval", required = true)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per refinement count.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long = "eval", required = true)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a toy RGB-D dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 224)]
        height: usize,
        #[arg(long, default_value_t = 224)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scan a dataset root and export its manifest as JSON lines.
    Manifest {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write `train.jsonl` and `test.jsonl` next to `--out` with this test share.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset root (`rgb/`, `depth/`, `gt/`) or an exported `.jsonl` manifest.
    #[arg(long, env = "MSIRN_DATA_ROOT")]
    data: PathBuf,
    /// Treat smaller depth values as nearer.
    #[arg(long)]
    invert_depth: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Components to remove, e.g. `CA,SA`. For `ablate`, the variants to run.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    /// Refinement steps. For `sweep-k`, a list such as `1,2,3,4,5,6`.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop after this many optimiser steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

impl ConfigArgs {
    /// File values, then flag overrides. Ablation flags and K are applied by
    /// the caller because their meaning differs between commands.
    fn base(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            run.model.seed = s;
        }
        if let Some(w) = self.width_scale {
            run.model = run.model.with_width_scale(w);
        }
        if let Some(e) = self.epochs {
            run.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            run.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            run.train.lr = lr;
        }
        if self.max_steps.is_some() {
            run.train.max_steps = self.max_steps;
        }
        Ok(run)
    }

    fn single_k(&self) -> Result<Option<usize>> {
        match self.k.as_slice() {
            [] => Ok(None),
            [k] => Ok(Some(*k)),
            _ => Err(Error::InvalidConfig("--k takes a single value here".into())),
        }
    }

    /// Config for a single model: overrides plus ablations and K.
    fn model_run(&self) -> Result<RunConfig> {
        let mut run = self.base()?;
        for &a in &self.ablate {
            run.model = run.model.with_ablation(a);
        }
        if let Some(k) = self.single_k()? {
            run.model.k = k;
        }
        validate(&run)?;
        Ok(run)
    }
}

fn validate(run: &RunConfig) -> Result<()> {
    run.model.validate()?;
    run.train.validate()
}

fn echo(run: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    log::info!("effective config:\n{}", run.to_toml()?);
    run.save(&out.join("config.toml"))
}

fn dataset(path: &Path, invert_depth: bool) -> Result<DatasetManifest> {
    let mut manifest = if path.is_file() {
        DatasetManifest::read_jsonl(path)?
    } else {
        let (m, issues) = load_manifest(path, &Layout::default())?;
        for i in &issues {
            log::warn!("{}: {:?} ({})", i.id, i.kind, i.detail);
        }
        m
    };
    manifest.invert_depth |= invert_depth;
    log::info!("dataset {}: {} samples", manifest.name, manifest.len());
    Ok(manifest)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, data, out, resume } => {
            let manifest = dataset(&data.data, data.invert_depth)?;
            let mut trainer = if resume {
                // Without --config the echoed config is the base; step and
                // epoch limits may still be extended from the command line.
                let mut run = match cfg.config {
                    Some(_) => cfg.model_run()?,
                    None => RunConfig::load(&out.join(msirn::train::CONFIG_ECHO))?,
                };
                if cfg.max_steps.is_some() {
                    run.train.max_steps = cfg.max_steps;
                }
                if let Some(e) = cfg.epochs {
                    run.train.epochs = e;
                }
                Trainer::resume(&out, manifest, Some(run))?
            } else {
                let run = cfg.model_run()?;
                echo(&run, &out)?;
                Trainer::new(run, manifest)?
            };
            let outcome = trainer.run(&out)?;
            println!(
                "trained {} steps; checkpoint {}",
                outcome.progress.step,
                outcome.checkpoint.display()
            );
        }
        Command::Predict { checkpoint, config, data, out } => {
            let expected = match config {
                Some(p) => Some(RunConfig::load(&p)?.model),
                None => None,
            };
            let model = Msirn::load(&checkpoint_dir(&checkpoint), expected.as_ref())?;
            let manifest = dataset(&data.data, data.invert_depth)?;
            let written = predict_manifest(&model, &manifest, &out)?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
        Command::Evaluate { pred, gt, data, out, beta_sq, alpha } => {
            let cfg = MetricConfig {
                beta_sq,
                alpha,
                ..MetricConfig::default()
            };
            let report = match (gt, data) {
                (Some(gt), _) => evaluate_directory(&pred, &gt, &cfg)?,
                (None, Some(d)) => evaluate_manifest(&pred, &dataset(&d, false)?, &cfg)?,
                (None, None) => return Err(Error::InvalidConfig("evaluate needs --gt or --data".into())),
            };
            report.write_all(&out)?;
            println!(
                "images {}  S {:.4}  maxF {:.4}  adpF {:.4}  maxE {:.4}  MAE {:.4}",
                report.images, report.s_measure, report.f_max, report.f_adaptive, report.e_max, report.mae
            );
        }
        Command::Ablate { cfg, data, eval, out } => {
            let mut base = cfg.base()?;
            if let Some(k) = cfg.single_k()? {
                base.model.k = k;
            }
            validate(&base)?;
            echo(&base, &out)?;
            let flags = if cfg.ablate.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                cfg.ablate.clone()
            };
            let train_set = dataset(&data.data, data.invert_depth)?;
            let sets = eval.iter().map(|p| dataset(p, data.invert_depth)).collect::<Result<Vec<_>>>()?;
            let results = ablate(&base, &flags, &train_set, &sets, &out, &MetricConfig::default())?;
            println!("{} variants; table in {}", results.len(), out.join(msirn::ablate::TABLE_FILE).display());
        }
        Command::SweepK { cfg, data, eval, out } => {
            let mut base = cfg.base()?;
            for &a in &cfg.ablate {
                base.model = base.model.with_ablation(a);
            }
            validate(&base)?;
            echo(&base, &out)?;
            let ks = if cfg.k.is_empty() { (1..=6).collect() } else { cfg.k.clone() };
            let train_set = dataset(&data.data, data.invert_depth)?;
            let sets = eval.iter().map(|p| dataset(p, data.invert_depth)).collect::<Result<Vec<_>>>()?;
            let results = sweep_k(&base, &ks, &train_set, &sets, &out, &MetricConfig::default())?;
            println!("{} runs; summary in {}", results.len(), out.join(msirn::ablate::SUMMARY_FILE).display());
        }
        Command::Synth { out, count, height, width, seed } => {
            let ids = write_dataset(
                &out,
                SynthSpec {
                    count,
                    size: (height, width),
                    seed,
                },
            )?;
            println!("wrote {} samples to {}", ids.len(), out.display());
        }
        Command::Manifest { data, out, test_fraction, seed } => {
            let manifest = dataset(&data.data, data.invert_depth)?;
            manifest.write_jsonl(&out)?;
            if let Some(f) = test_fraction {
                let (train, test) = manifest.split(f, seed)?;
                let dir = out.parent().unwrap_or(Path::new("."));
                train.write_jsonl(&dir.join("train.jsonl"))?;
                test.write_jsonl(&dir.join("test.jsonl"))?;
            }
            println!("{} entries", manifest.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
