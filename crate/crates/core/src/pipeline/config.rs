use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::encoder::{Backbone, BackboneKind, Normalization};
use crate::error::{Error, Result};
use crate::localizer::LocalizerConfig;
use crate::losses::{LossRecipe, LossSchedule, LscParams};
use crate::nn::ParamGroup;
use crate::refiner::AffinityKernelParams;
use crate::types::MIN_IMAGE_SIDE;
use crate::unss::UnssParams;

pub const SEED_ENV: &str = "USOD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Values at or above this are certain foreground.
    pub theta_f: f64,
    /// Values at or below this are certain background.
    pub theta_g: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { theta_f: 0.6, theta_g: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub encoder: f64,
    pub localizer: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { encoder: 0.0005, localizer: 0.0005, decoder: 0.005 }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Localizer => self.localizer,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: LearningRates,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: LearningRates::default(), momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Crop area as a fraction of the source image, sampled uniformly.
    pub min_crop_area: f64,
    pub max_crop_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, min_crop_area: 0.8, max_crop_area: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Flat directory of training images.
    pub train_dir: PathBuf,
    /// Directory scored by `ablate`; its `gt/` sub-directory holds masks.
    pub eval_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_dir: PathBuf::from("data/train"), eval_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneKind,
    /// Optional backbone weight archive.
    pub pretrained: Option<PathBuf>,
    pub normalization: Normalization,
    /// Use batch statistics in encoder normalization layers while training.
    pub encoder_batch_stats: bool,
    pub bn_momentum: f64,
    pub thresholds: Thresholds,
    pub localizer: LocalizerConfig,
    pub refiner: AffinityKernelParams,
    pub unss: UnssParams,
    pub decoder: DecoderConfig,
    pub schedule: LossSchedule,
    pub recipe: LossRecipe,
    pub lsc: LscParams,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 352,
            batch_size: 16,
            epochs: 10,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            backbone: BackboneKind::ResNet50,
            pretrained: None,
            normalization: Normalization::default(),
            encoder_batch_stats: true,
            bn_momentum: 0.1,
            thresholds: Thresholds::default(),
            localizer: LocalizerConfig::default(),
            refiner: AffinityKernelParams::default(),
            unss: UnssParams::default(),
            decoder: DecoderConfig::default(),
            schedule: LossSchedule::default(),
            recipe: LossRecipe::default(),
            lsc: LscParams::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small toy-backbone setup for desk-scale runs and tests.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            batch_size: 8,
            backbone: BackboneKind::default(),
            decoder: DecoderConfig { width: 16, ..DecoderConfig::default() },
            ..Self::default()
        }
    }

    /// The toy setup with ten times the default learning rates, run for 200
    /// steps on a 64-image dataset. Used for quick end-to-end checks.
    pub fn smoke() -> Self {
        let mut cfg = Self::toy();
        cfg.epochs = 25;
        cfg.optimizer.lr = LearningRates { encoder: 0.005, localizer: 0.005, decoder: 0.05 };
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory, and `USOD_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.train_dir);
        if let Some(p) = self.data.eval_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pretrained.as_mut() {
            fix(p);
        }
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let lr = &self.optimizer.lr;
        if [lr.encoder, lr.localizer, lr.decoder].iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if self.epochs > 0 && self.epochs < self.schedule.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) shorter than the warm-up ({})",
                self.epochs, self.schedule.warmup_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let stride = Backbone::new(self.backbone.clone())?.max_stride();
        if self.image_size < MIN_IMAGE_SIDE || self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image size {} must be ≥ {MIN_IMAGE_SIDE} and divisible by {stride}",
                self.image_size
            )));
        }
        crate::types::check_thresholds(self.thresholds.theta_f, self.thresholds.theta_g)?;
        self.refiner.validate()?;
        self.unss.validate()?;
        self.schedule.warmup.validate()?;
        self.schedule.main.validate()?;
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) || !(a.min_crop_area > 0.0 && a.min_crop_area <= a.max_crop_area && a.max_crop_area <= 1.0) {
            return Err(Error::Config("augmentation needs flip_prob in [0, 1] and 0 < min ≤ max ≤ 1 crop area".into()));
        }
        if self.localizer.scales.is_empty() || self.localizer.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("localizer scales must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Digest of everything that shapes the optimization trajectory; run
    /// length and output location are excluded so a run can be extended.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.epochs = 0;
        canonical.output_dir = PathBuf::new();
        canonical.data = DataConfig::default();
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Input side for a localizer scale, rounded to a multiple of the stride.
    pub fn scaled_size(&self, scale: f64, stride: usize) -> usize {
        let raw = self.image_size as f64 * scale / stride as f64;
        (raw.round() as usize).max(1) * stride
    }
}
