//! SGD training loop with JSONL step logs and resumable checkpoints.
//!
//! An output directory holds:
//! - `config.toml`: the effective run configuration;
//! - `train_log.jsonl`: one [`StepRecord`] per optimizer step;
//! - `checkpoint/`: model weights and config, optimizer buffers and progress.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{write_atomic, RunConfig};
use crate::data::{batch_iterator, Batcher, DatasetManifest, SampleBatch};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::Msirn;
use crate::nn::{save_tensors, ParamStore};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const PROGRESS_FILE: &str = "progress.json";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based count of optimizer steps taken so far.
    pub step: usize,
    /// Index of the batch within its epoch.
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub terms: usize,
    pub loss: LossBreakdown,
    pub ids: Vec<String>,
}

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `b <- μ b + g + wd p`, `p <- p - lr b` (the buffer starts at the first
/// step's `g + wd p`).
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut d = g.detach();
            if self.weight_decay != 0.0 {
                d = (d + (&p * self.weight_decay)?)?;
            }
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + d)?,
                _ => d,
            };
            var.set(&(p - (&buf * lr)?)?)?;
            if self.momentum != 0.0 {
                self.buffers.insert(name.to_string(), buf);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())), path)
    }

    pub fn load(&mut self, path: &Path, device: &Device) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, device)?;
        self.buffers = loaded.into_iter().collect();
        Ok(())
    }
}

/// Where training stands: the next epoch and batch to run, and the number
/// of steps taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub progress: Progress,
    pub last: Option<StepRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub struct Trainer {
    run: RunConfig,
    model: Msirn,
    opt: Sgd,
    batcher: Batcher,
    progress: Progress,
}

fn make_batcher(run: &RunConfig, manifest: DatasetManifest) -> Result<Batcher> {
    let [h, w] = run.model.input_size;
    batch_iterator(manifest, run.train.batch_size, run.model.seed, run.train.shuffle, (h, w))?.preload()
}

impl Trainer {
    pub fn new(run: RunConfig, manifest: DatasetManifest) -> Result<Self> {
        run.train.validate()?;
        let model = Msirn::new(run.model.clone())?;
        let batcher = make_batcher(&run, manifest)?;
        Ok(Trainer {
            opt: Sgd::new(run.train.momentum, run.train.weight_decay),
            run,
            model,
            batcher,
            progress: Progress::default(),
        })
    }

    /// Restores model, optimizer and progress from `out_dir/checkpoint`.
    /// `run` defaults to the configuration echoed into `out_dir`.
    pub fn resume(out_dir: &Path, manifest: DatasetManifest, run: Option<RunConfig>) -> Result<Self> {
        let run = match run {
            Some(r) => r,
            None => RunConfig::load(&out_dir.join(CONFIG_ECHO))?,
        };
        run.train.validate()?;
        let ckpt = out_dir.join(CHECKPOINT_DIR);
        let model = Msirn::load(&ckpt, Some(&run.model))?;
        let mut opt = Sgd::new(run.train.momentum, run.train.weight_decay);
        opt.load(&ckpt.join(OPTIMIZER_FILE), model.params().device())?;
        let path = ckpt.join(PROGRESS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let progress = serde_json::from_str(&text)?;
        let batcher = make_batcher(&run, manifest)?;
        Ok(Trainer {
            run,
            model,
            opt,
            batcher,
            progress,
        })
    }

    pub fn model(&self) -> &Msirn {
        &self.model
    }

    pub fn into_model(self) -> Msirn {
        self.model
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn batcher(&self) -> &Batcher {
        &self.batcher
    }

    /// Forward, loss, backward and update on one batch.
    pub fn step(&mut self, batch: &SampleBatch, epoch: usize) -> Result<StepRecord> {
        let device = self.model.params().device().clone();
        let (rgb, depth, gt) = batch.to_tensors(&device)?;
        let lr = self.run.train.lr_at_epoch(epoch);
        let lambda = self.run.model.lambda.at_epoch(epoch);
        let pred = self.model.forward(&rgb, &depth, true)?;
        let loss = total_loss(&pred, &gt, lambda)?;
        if !loss.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.progress.step + 1,
            });
        }
        let grads = loss.total.backward()?;
        self.opt.step(self.model.params(), &grads, lr)?;
        Ok(StepRecord {
            epoch,
            step: self.progress.step + 1,
            batch: self.progress.batch,
            lr,
            lambda,
            terms: loss.breakdown.terms(),
            loss: loss.breakdown,
            ids: batch.ids().iter().map(|s| s.to_string()).collect(),
        })
    }

    fn done(&self) -> bool {
        self.progress.epoch >= self.run.train.epochs
            || self.run.train.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// Trains until the configured epoch count or step limit, logging every
    /// step and checkpointing on schedule and at the end. A non-finite loss
    /// aborts without touching the last checkpoint.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        self.run.save(&out_dir.join(CONFIG_ECHO))?;
        let log_path = out_dir.join(LOG_FILE);
        truncate_log(&log_path, self.progress.step)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut last = None;

        while !self.done() {
            let epoch = self.progress.epoch;
            let plan = self.batcher.plan(epoch);
            while self.progress.batch < plan.len() && !self.done() {
                let batch = self.batcher.load(&plan[self.progress.batch])?;
                let record = self.step(&batch, epoch)?;
                serde_json::to_writer(&mut log, &record)?;
                log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                log::info!(
                    "epoch {} step {} loss {:.6}",
                    record.epoch,
                    record.step,
                    record.loss.total
                );
                self.progress.step += 1;
                self.progress.batch += 1;
                last = Some(record);
            }
            if self.progress.batch >= plan.len() {
                self.progress.epoch += 1;
                self.progress.batch = 0;
                if self.progress.epoch.is_multiple_of(self.run.train.checkpoint_every) && !self.done() {
                    self.save_checkpoint(out_dir)?;
                }
            }
        }
        let checkpoint = self.save_checkpoint(out_dir)?;
        Ok(TrainOutcome {
            progress: self.progress,
            last,
            checkpoint,
            log: log_path,
        })
    }

    /// Writes the checkpoint into a scratch directory and swaps it in.
    pub fn save_checkpoint(&self, out_dir: &Path) -> Result<PathBuf> {
        let dst = out_dir.join(CHECKPOINT_DIR);
        let tmp = out_dir.join(format!("{CHECKPOINT_DIR}.tmp"));
        let old = out_dir.join(format!("{CHECKPOINT_DIR}.old"));
        for d in [&tmp, &old] {
            if d.exists() {
                std::fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        self.model.save(&tmp)?;
        self.opt.save(&tmp.join(OPTIMIZER_FILE))?;
        write_atomic(&tmp.join(PROGRESS_FILE), serde_json::to_string(&self.progress)?.as_bytes())?;
        if dst.exists() {
            std::fs::rename(&dst, &old).map_err(|e| Error::io(&dst, e))?;
        }
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&tmp, e))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(dst)
    }
}

/// Drops log records past `keep_steps`, left over from a run that went on
/// beyond the checkpoint being resumed.
fn truncate_log(path: &Path, keep_steps: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept = read_log(path)?
        .into_iter()
        .filter(|r| r.step <= keep_steps)
        .map(|r| serde_json::to_string(&r).map(|s| s + "\n"))
        .collect::<std::result::Result<String, _>>()?;
    write_atomic(path, kept.as_bytes())
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn train(run: RunConfig, manifest: DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::new(run, manifest)?.run(out_dir)
}
