use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Var};
use crate::decoder::Decoder;
use crate::encoder::{load_pretrained, Backbone, PyramidVars};
use crate::error::{Error, Result};
use crate::localizer::{multiscale_fuse_on_tape, orient_foreground, sosl_from_map, stretch_maps, ActivationHead, SoslTerms};
use crate::losses::{iou_loss, lsc_loss, partial_bce, total_loss, LabelSource, LossComponents, LossValue};
use crate::nn::{Graph, Mode, ParamStore};
use crate::refiner::refine_scaled;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::types::binarize_certain;
use crate::unss::unss_batch;

use super::config::TrainConfig;

/// The three pseudo-labels for a batch, all at input resolution.
#[derive(Clone, Debug)]
pub struct PseudoLabels<T> {
    /// Fused activation map, upsampled and oriented.
    pub location: Tensor<T>,
    /// Location label after pixel-adaptive refinement.
    pub detailed: Tensor<T>,
    /// Detailed label after non-salient suppression.
    pub suppressed: Tensor<T>,
    /// Images whose activation map was inverted.
    pub flipped: Vec<bool>,
}

impl<T: Scalar> PseudoLabels<T> {
    pub fn get(&self, source: LabelSource) -> &Tensor<T> {
        match source {
            LabelSource::Location => &self.location,
            // the detailed label the decoder sees has already been through suppression
            LabelSource::Detailed => &self.suppressed,
        }
    }
}

/// Loss values and parameter gradients of one training batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub components: LossComponents<T>,
    pub sosl_terms: SoslTerms<T>,
    pub total: T,
    pub grads: HashMap<String, Tensor<T>>,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
    pub labels: PseudoLabels<T>,
    pub prediction: Tensor<T>,
}

/// Encoder, activation head and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: TrainConfig,
    pub backbone: Backbone,
    pub head: ActivationHead,
    pub decoder: Decoder,
    pub store: ParamStore<T>,
}

struct Localized {
    fused: Var,
    features: Var,
    pyramid: PyramidVars,
}

impl<T: Scalar> Model<T> {
    /// Fresh model; loads backbone weights when the config names an archive.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut model = Self::initialized(config)?;
        if let Some(path) = model.config.pretrained.clone() {
            let report = load_pretrained(&model.backbone, &mut model.store, &path)?;
            log::info!("loaded {} backbone tensors from {}", report.assigned, path.display());
        }
        Ok(model)
    }

    /// Seeded random initialization only.
    pub fn initialized(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let ch = backbone.channels();
        let head = ActivationHead::new(ch[3], ch[4]);
        let decoder = Decoder::new(config.decoder.clone(), &ch)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        backbone.register(&mut store, &mut rng);
        head.register(&mut store, &mut rng);
        decoder.register(&mut store, &mut rng);
        Ok(Self { config, backbone, head, decoder, store })
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let size = self.config.image_size;
        if s.c != 3 || s.h != size || s.w != size || s.n == 0 {
            return Err(Error::Shape(format!("model expects N×3×{size}×{size}, got {s}")));
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph<'_, T>, images: &Tensor<T>) -> Result<PyramidVars> {
        let x = g.tape.constant(self.config.normalization.apply(images));
        self.backbone.forward(g, x)
    }

    /// Activation maps at every configured scale fused on the full-scale grid.
    fn localize(&self, g: &mut Graph<'_, T>, images: &Tensor<T>) -> Result<Localized> {
        let size = self.config.image_size;
        let stride = self.backbone.max_stride();
        let mut maps = Vec::new();
        let mut full: Option<(Var, PyramidVars)> = None;
        for &scale in &self.config.localizer.scales {
            let side = self.config.scaled_size(scale, stride);
            let input = if side == size { images.clone() } else { images.resize_bilinear(side, side) };
            let pyramid = self.encode(g, &input)?;
            let features = self.head.features(g, pyramid.levels[3], pyramid.levels[4])?;
            maps.push(self.head.activation(g, features)?);
            if side == size && full.is_none() {
                full = Some((features, pyramid));
            }
        }
        let (features, pyramid) = match full {
            Some(f) => f,
            None => {
                let pyramid = self.encode(g, images)?;
                (self.head.features(g, pyramid.levels[3], pyramid.levels[4])?, pyramid)
            }
        };
        let grid = g.tape.shape(features);
        let fused = multiscale_fuse_on_tape(&mut g.tape, &maps, self.config.localizer.scales.len(), grid.h, grid.w)?;
        Ok(Localized { fused, features, pyramid })
    }

    /// Location, detailed and suppressed labels from a fused activation map.
    pub fn labels_from_map(&self, fused: &Tensor<T>, images: &Tensor<T>, orient: bool) -> Result<PseudoLabels<T>> {
        let s = images.shape();
        let mut location = fused.resize_bilinear(s.h, s.w).map(|v| v.max(T::zero()).min(T::one()));
        if self.config.localizer.stretch_labels {
            location = stretch_maps(&location);
        }
        let mut flipped = vec![false; s.n];
        if orient {
            (location, flipped) = orient_foreground(&location);
        }
        let theta_f = lit::<T>(self.config.thresholds.theta_f);
        let detailed = refine_scaled(&location, images, &self.config.refiner, theta_f)?;
        let suppressed = unss_batch(&detailed, theta_f, &self.config.unss)?;
        Ok(PseudoLabels { location, detailed, suppressed, flipped })
    }

    /// Evaluation-mode pseudo-labels for `N×3×S×S` images.
    pub fn pseudo_labels(&self, images: &Tensor<T>, orient: bool) -> Result<PseudoLabels<T>> {
        self.check_input(images)?;
        let mut g = Graph::new(&self.store, Mode::Eval, false);
        let loc = self.localize(&mut g, images)?;
        let fused = g.tape.value(loc.fused).clone();
        self.labels_from_map(&fused, images, orient)
    }

    /// Evaluation-mode saliency maps for `N×3×S×S` images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut g = Graph::new(&self.store, Mode::Eval, false);
        let pyramid = self.encode(&mut g, images)?;
        let s = images.shape();
        let m = self.decoder.forward(&mut g, &pyramid.levels, s.h, s.w)?;
        Ok(g.tape.value(m).clone())
    }

    /// Forward and backward pass of one training batch at zero-based `epoch`.
    pub fn step_gradients(&self, images: &Tensor<T>, epoch: usize) -> Result<StepOutput<T>> {
        self.check_input(images)?;
        let cfg = &self.config;
        let mode = Mode::Train { encoder_batch_stats: cfg.encoder_batch_stats };
        let mut g = Graph::new(&self.store, mode, true);

        let loc = self.localize(&mut g, images)?;
        let (sosl, sosl_terms) = sosl_from_map(&mut g.tape, loc.fused, loc.features, cfg.localizer.alpha_rank)?;

        let warmup = cfg.schedule.in_warmup(epoch);
        let fused = g.tape.value(loc.fused).clone();
        let labels = self.labels_from_map(&fused, images, !warmup)?;

        let s = images.shape();
        let m = self.decoder.forward(&mut g, &loc.pyramid.levels, s.h, s.w)?;
        let prediction = g.tape.value(m).clone();
        let zero = || LossValue { value: T::zero(), grad: Tensor::zeros(prediction.shape()) };
        let (tf, tg) = (lit::<T>(cfg.thresholds.theta_f), lit::<T>(cfg.thresholds.theta_g));
        let pbce = match cfg.recipe.pbce {
            Some(src) => partial_bce(&prediction, &binarize_certain(labels.get(src), tf, tg)?)?,
            None => zero(),
        };
        let lsc = if cfg.recipe.lsc { lsc_loss(&prediction, images, &cfg.lsc)? } else { zero() };
        let iou = match cfg.recipe.iou {
            Some(src) => iou_loss(&prediction, labels.get(src))?,
            None => zero(),
        };
        let components = LossComponents { sosl: sosl_terms.total(), pbce: pbce.value, lsc: lsc.value, iou: iou.value };
        let weights = cfg.schedule.weights_at(epoch);
        if !components.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                indices: Vec::new(),
                detail: format!(
                    "sosl={} pbce={} lsc={} iou={}",
                    components.sosl, components.pbce, components.lsc, components.iou
                ),
            });
        }
        total_loss(&components, &weights)?;

        let nodes = [
            sosl,
            g.tape.local(pbce.value, &[m], vec![pbce.grad])?,
            g.tape.local(lsc.value, &[m], vec![lsc.grad])?,
            g.tape.local(iou.value, &[m], vec![iou.grad])?,
        ];
        let (a, b1, b2) = (lit::<T>(weights.alpha), lit::<T>(weights.beta1), lit::<T>(weights.beta2));
        let total = g.tape.weighted_sum(&nodes, &[a, b1, b1, b2])?;
        let back = g.tape.backward(total)?;

        let mut grads = HashMap::new();
        for (name, &var) in g.param_vars() {
            let p = self.store.get(name)?;
            if p.trainable {
                grads.insert(name.clone(), back.get_or_zeros(var, p.value.shape()));
            }
        }
        let bn_updates = g.take_bn_updates();
        Ok(StepOutput {
            components,
            sosl_terms,
            total: g.tape.value(total).item(),
            grads,
            bn_updates,
            labels,
            prediction,
        })
    }
}
