use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::checkpoint::{resume_checkpoint, save_checkpoint, Progress};
use super::config::TrainConfig;
use super::data::{epoch_order, Dataset};
use super::model::{Model, StepOutput};
use super::optim::Sgd;

pub const LOG_HEADER: &str = "step,epoch,sosl,pbce,lsc,iou,total";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest.safetensors";

pub fn epoch_checkpoint(output_dir: &Path, epoch: usize) -> PathBuf {
    output_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.safetensors"))
}

pub fn latest_checkpoint(output_dir: &Path) -> PathBuf {
    output_dir.join(CHECKPOINT_DIR).join(LATEST)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// One-based global step.
    pub step: usize,
    /// Zero-based epoch.
    pub epoch: usize,
    pub sosl: f64,
    pub pbce: f64,
    pub lsc: f64,
    pub iou: f64,
    pub total: f64,
}

impl LogRow {
    pub fn from_step<T: Scalar>(step: usize, epoch: usize, out: &StepOutput<T>) -> Self {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        let c = &out.components;
        Self { step, epoch, sosl: f(c.sosl), pbce: f(c.pbce), lsc: f(c.lsc), iou: f(c.iou), total: f(out.total) }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.epoch, self.sosl, self.pbce, self.lsc, self.iou, self.total
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            sosl: num(2)?,
            pbce: num(3)?,
            lsc: num(4)?,
            iou: num(5)?,
            total: num(6)?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(row) = LogRow::parse(&line) {
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under a different config.
    pub force: bool,
}

/// Final state of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub progress: Progress,
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

/// Model, optimizer and counters advanced one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub progress: Progress,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>) -> Self {
        let optimizer = Sgd::new(model.config.optimizer.clone());
        Self { model, optimizer, progress: Progress::default() }
    }

    /// Computes the losses of `images` at `epoch` and applies one update.
    pub fn step(&mut self, images: &crate::tensor::Tensor<T>, epoch: usize) -> Result<StepOutput<T>> {
        let out = self.model.step_gradients(images, epoch).map_err(|e| match e {
            Error::NonFiniteLoss { indices, detail, .. } => {
                Error::NonFiniteLoss { step: self.progress.step + 1, indices, detail }
            }
            other => other,
        })?;
        self.optimizer.step(&mut self.model.store, &out.grads)?;
        let momentum = lit::<T>(self.model.config.bn_momentum);
        self.model.store.apply_batch_stats(&out.bn_updates, momentum)?;
        self.progress.step += 1;
        Ok(out)
    }
}

fn write_dump(dir: &Path, step: usize, dataset: &Dataset, indices: &[usize], detail: &str) {
    let path = dir.join(format!("nonfinite_step{step}.txt"));
    let mut text = format!("{detail}\n");
    for &i in indices {
        text.push_str(&format!("{i}\t{}\n", dataset.images[i].display()));
    }
    if let Err(e) = fs::write(&path, text) {
        log::error!("could not write {}: {e}", path.display());
    }
}

fn open_log(path: &Path, keep_until: Option<usize>) -> Result<(File, Vec<LogRow>)> {
    let mut kept = Vec::new();
    if let Some(limit) = keep_until {
        if path.exists() {
            kept = read_log(path)?.into_iter().filter(|r| r.step <= limit).collect();
        }
    }
    let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{LOG_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok((file, kept))
}

/// Runs (or continues) training as configured, writing per-epoch
/// checkpoints, `latest.safetensors`, `config.toml` and `metrics.csv` into
/// the output directory.
pub fn train<T: Scalar>(config: &TrainConfig, options: &TrainOptions) -> Result<TrainRun<T>> {
    config.validate()?;
    let dataset = Dataset::open(&config.data.train_dir)?;
    let out = &config.output_dir;
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    config.save(&out.join(CONFIG_FILE))?;

    let mut trainer = match &options.resume {
        Some(path) => {
            let ckpt = resume_checkpoint::<T>(path, config, options.force)?;
            log::info!("resuming from {} at epoch {}, step {}", path.display(), ckpt.progress.epoch, ckpt.progress.step);
            Trainer { model: ckpt.model, optimizer: ckpt.optimizer, progress: ckpt.progress }
        }
        None => Trainer::new(Model::new(config.clone())?),
    };
    let log_path = out.join(METRICS_FILE);
    let resumed = options.resume.is_some();
    let (mut log_file, mut rows) = open_log(&log_path, resumed.then_some(trainer.progress.step))?;

    let latest = latest_checkpoint(out);
    if !resumed {
        save_checkpoint(&epoch_checkpoint(out, 0), &trainer.model, &trainer.optimizer, trainer.progress)?;
        save_checkpoint(&latest, &trainer.model, &trainer.optimizer, trainer.progress)?;
    }

    for epoch in trainer.progress.epoch..config.epochs {
        let order = epoch_order(dataset.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            let images = dataset.training_batch::<T>(batch, config.image_size, &config.augment, config.seed, epoch)?;
            let result = trainer.step(&images, epoch);
            let step_out = match result {
                Ok(o) => o,
                Err(Error::NonFiniteLoss { step, detail, .. }) => {
                    write_dump(out, step, &dataset, batch, &detail);
                    return Err(Error::NonFiniteLoss { step, indices: batch.to_vec(), detail });
                }
                Err(e) => return Err(e),
            };
            let row = LogRow::from_step(trainer.progress.step, epoch, &step_out);
            writeln!(log_file, "{}", row.to_line()).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("{}", row.to_line());
            rows.push(row);
        }
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;
        trainer.progress.epoch = epoch + 1;
        save_checkpoint(&epoch_checkpoint(out, epoch + 1), &trainer.model, &trainer.optimizer, trainer.progress)?;
        save_checkpoint(&latest, &trainer.model, &trainer.optimizer, trainer.progress)?;
        if let Some(last) = rows.last() {
            log::info!("epoch {} done: step {} total {:.4}", epoch + 1, last.step, last.total);
        }
    }
    Ok(TrainRun { model: trainer.model, optimizer: trainer.optimizer, progress: trainer.progress, log: rows, checkpoint: latest })
}
