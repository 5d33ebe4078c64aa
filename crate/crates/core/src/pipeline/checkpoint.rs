use std::collections::HashMap;
use std::path::Path;

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::config::TrainConfig;
use super::model::Model;
use super::optim::Sgd;

const FORMAT: &str = "usod-checkpoint-1";

/// Training position recorded with a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

/// A model, its optimizer state and the position it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub progress: Progress,
    pub config_hash: String,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, optimizer: &Sgd<T>, progress: Progress) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    for (name, p) in model.store.iter() {
        let kind = if p.trainable { "param" } else { "buffer" };
        entries.push((format!("{kind}/{name}"), p.dims.clone(), p.value.data()));
    }
    for (name, v) in &optimizer.velocity {
        let dims = model.store.get(name)?.dims.clone();
        entries.push((format!("momentum/{name}"), dims, v.data()));
    }
    let metadata: HashMap<String, String> = [
        ("format", FORMAT.to_string()),
        ("epoch", progress.epoch.to_string()),
        ("step", progress.step.to_string()),
        ("seed", model.config.seed.to_string()),
        ("config_hash", model.config.hash()?),
        ("config", model.config.to_toml()?),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_archive(path, &entries, metadata)
}

fn meta<'a>(metadata: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Contract(format!("checkpoint metadata lacks `{key}`")))
}

fn parse_usize(metadata: &HashMap<String, String>, key: &str) -> Result<usize> {
    meta(metadata, key)?
        .parse()
        .map_err(|_| Error::Contract(format!("checkpoint metadata `{key}` is not an integer")))
}

/// Restores a checkpoint exactly as written, using the config stored inside it.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let archive = read_archive::<T>(path)?;
    if meta(&archive.metadata, "format")? != FORMAT {
        return Err(Error::Contract(format!("{} is not a training checkpoint", path.display())));
    }
    let config: TrainConfig = toml::from_str(meta(&archive.metadata, "config")?)?;
    let progress = Progress { epoch: parse_usize(&archive.metadata, "epoch")?, step: parse_usize(&archive.metadata, "step")? };
    let config_hash = meta(&archive.metadata, "config_hash")?.to_string();
    let mut model = Model::<T>::initialized(config.clone())?;
    let mut optimizer = Sgd::new(config.optimizer.clone());

    let mut missing = Vec::new();
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let p = model.store.get_mut(&name)?;
        let kind = if p.trainable { "param" } else { "buffer" };
        let Some(t) = archive.tensors.get(&format!("{kind}/{name}")) else {
            missing.push(name);
            continue;
        };
        if t.dims != p.dims {
            return Err(Error::TensorShape { name, expected: p.dims.clone(), found: t.dims.clone() });
        }
        p.value = Tensor::from_vec(p.value.shape(), t.values.clone())?;
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    for (key, t) in &archive.tensors {
        if let Some(name) = key.strip_prefix("momentum/") {
            let shape: Shape = model.store.get(name)?.value.shape();
            optimizer.velocity.insert(name.to_string(), Tensor::from_vec(shape, t.values.clone())?);
        }
    }
    Ok(Checkpoint { model, optimizer, progress, config_hash })
}

/// Loads a checkpoint to continue training under `config`.
///
/// The stored config hash must match unless `force` is set; the returned
/// model adopts `config` (so run length and output paths may differ).
pub fn resume_checkpoint<T: Scalar>(path: &Path, config: &TrainConfig, force: bool) -> Result<Checkpoint<T>> {
    let mut ckpt = load_checkpoint::<T>(path)?;
    let expected = config.hash()?;
    if ckpt.config_hash != expected {
        if !force {
            return Err(Error::ConfigHashMismatch { expected, found: ckpt.config_hash });
        }
        log::warn!("resuming despite config hash mismatch ({} vs {expected})", ckpt.config_hash);
    }
    ckpt.model.config = config.clone();
    ckpt.optimizer.config = config.optimizer.clone();
    Ok(ckpt)
}
