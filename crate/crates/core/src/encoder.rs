//! Five-level feature extraction.
//!
//! Two backbones implement the pyramid contract:
//!
//! * [`BackboneKind::Toy`]: five `conv3×3 → BN → ReLU` stages with strides
//!   `{1, 2, 2, 2, 2}` (pyramid strides `{1, 2, 4, 8, 16}`), under 100k
//!   parameters, used for desk-scale training and tests.
//! * [`BackboneKind::ResNet50`]: the 50-layer bottleneck network with pyramid
//!   strides `{2, 4, 8, 16, 32}`; levels are the stem output and the four
//!   residual stages.
//!
//! Weight archive names for the 50-layer network follow the torchvision
//! layout relative to the backbone (`conv1.weight`, `bn1.running_mean`,
//! `layer3.4.conv2.weight`, `layer1.0.downsample.1.bias`, ...). Inside the
//! parameter store they carry the `encoder.` prefix. The toy backbone uses
//! `stage{k}.conv.weight` and `stage{k}.bn.*` for `k = 1..5`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::read_archive;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, Init, Mode, ParamGroup, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneKind {
    Toy {
        channels: [usize; LEVELS],
        /// Zero padding keeps each level exactly `input / stride`; without it
        /// the network is translation-equivariant but shrinks at the borders.
        #[serde(default = "default_true")]
        padded: bool,
    },
    #[serde(rename = "resnet50")]
    ResNet50,
}

fn default_true() -> bool {
    true
}

impl Default for BackboneKind {
    fn default() -> Self {
        BackboneKind::Toy { channels: [16, 24, 32, 48, 64], padded: true }
    }
}

/// Five tape variables `F1..F5`, finest first.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; LEVELS],
}

/// Detached copy of a pyramid.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Clone, Debug)]
enum Layers {
    Toy { stages: Vec<(Conv2d, BatchNorm2d)> },
    ResNet { stem: (Conv2d, BatchNorm2d), stages: Vec<Vec<Bottleneck>> },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    kind: BackboneKind,
    layers: Layers,
}

const G: ParamGroup = ParamGroup::Encoder;

impl Backbone {
    pub fn new(kind: BackboneKind) -> Result<Self> {
        let layers = match &kind {
            BackboneKind::Toy { channels, padded } => {
                if channels.iter().any(|&c| c == 0) {
                    return Err(Error::Config("toy backbone channels must be positive".into()));
                }
                let mut in_c = 3;
                let stages = (0..LEVELS)
                    .map(|k| {
                        let name = format!("encoder.stage{}", k + 1);
                        let conv = Conv2d::new(format!("{name}.conv"), in_c, channels[k], 3, G)
                            .stride(if k == 0 { 1 } else { 2 })
                            .pad(usize::from(*padded));
                        let bn = BatchNorm2d::new(format!("{name}.bn"), channels[k], G);
                        in_c = channels[k];
                        (conv, bn)
                    })
                    .collect();
                Layers::Toy { stages }
            }
            BackboneKind::ResNet50 => {
                let stem = (
                    Conv2d::new("encoder.conv1", 3, 64, 7, G).stride(2).pad(3),
                    BatchNorm2d::new("encoder.bn1", 64, G),
                );
                let mut in_c = 64;
                let mut stages = Vec::new();
                for (li, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    let out_c = width * 4;
                    let mut layer = Vec::new();
                    for b in 0..blocks {
                        let stride = if b == 0 && li > 0 { 2 } else { 1 };
                        let p = format!("encoder.layer{}.{b}", li + 1);
                        let downsample = (b == 0).then(|| {
                            (
                                Conv2d::new(format!("{p}.downsample.0"), in_c, out_c, 1, G).stride(stride),
                                BatchNorm2d::new(format!("{p}.downsample.1"), out_c, G),
                            )
                        });
                        layer.push(Bottleneck {
                            conv1: Conv2d::new(format!("{p}.conv1"), in_c, width, 1, G),
                            bn1: BatchNorm2d::new(format!("{p}.bn1"), width, G),
                            conv2: Conv2d::new(format!("{p}.conv2"), width, width, 3, G).stride(stride),
                            bn2: BatchNorm2d::new(format!("{p}.bn2"), width, G),
                            conv3: Conv2d::new(format!("{p}.conv3"), width, out_c, 1, G),
                            bn3: BatchNorm2d::new(format!("{p}.bn3"), out_c, G),
                            downsample,
                        });
                        in_c = out_c;
                    }
                    stages.push(layer);
                }
                Layers::ResNet { stem, stages }
            }
        };
        Ok(Self { kind, layers })
    }

    pub fn kind(&self) -> &BackboneKind {
        &self.kind
    }

    pub fn strides(&self) -> [usize; LEVELS] {
        match self.kind {
            BackboneKind::Toy { .. } => [1, 2, 4, 8, 16],
            BackboneKind::ResNet50 => [2, 4, 8, 16, 32],
        }
    }

    pub fn max_stride(&self) -> usize {
        self.strides()[LEVELS - 1]
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        match self.kind {
            BackboneKind::Toy { channels, .. } => channels,
            BackboneKind::ResNet50 => [64, 256, 512, 1024, 2048],
        }
    }

    /// Spatial size of every level for an `h×w` input (padded configurations).
    pub fn level_sizes(&self, h: usize, w: usize) -> [(usize, usize); LEVELS] {
        let s = self.strides();
        std::array::from_fn(|k| (h / s[k], w / s[k]))
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        match &self.layers {
            Layers::Toy { stages } => {
                for (conv, bn) in stages {
                    conv.register(store, Init::KaimingNormal, rng);
                    bn.register(store);
                }
            }
            Layers::ResNet { stem, stages } => {
                stem.0.register(store, Init::KaimingNormal, rng);
                stem.1.register(store);
                for block in stages.iter().flatten() {
                    for (conv, bn) in [(&block.conv1, &block.bn1), (&block.conv2, &block.bn2), (&block.conv3, &block.bn3)] {
                        conv.register(store, Init::KaimingNormal, rng);
                        bn.register(store);
                    }
                    if let Some((conv, bn)) = &block.downsample {
                        conv.register(store, Init::KaimingNormal, rng);
                        bn.register(store);
                    }
                }
            }
        }
    }

    /// Runs the backbone on an already normalized `N×3×H×W` input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<PyramidVars> {
        let mut levels = Vec::with_capacity(LEVELS);
        match &self.layers {
            Layers::Toy { stages } => {
                let mut h = x;
                for (conv, bn) in stages {
                    let c = conv.forward(g, h)?;
                    let b = bn.forward(g, c)?;
                    h = g.tape.relu(b);
                    levels.push(h);
                }
            }
            Layers::ResNet { stem, stages } => {
                let c = stem.0.forward(g, x)?;
                let b = stem.1.forward(g, c)?;
                let f1 = g.tape.relu(b);
                levels.push(f1);
                let mut h = g.tape.max_pool(f1, 3, 2, 1);
                for layer in stages {
                    for block in layer {
                        h = block.forward(g, h)?;
                    }
                    levels.push(h);
                }
            }
        }
        Ok(PyramidVars { levels: levels.try_into().expect("five levels") })
    }

    /// Names of every tensor the backbone owns (parameters and running statistics).
    pub fn tensor_names<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<String> {
        store
            .iter()
            .filter(|(n, p)| p.group == G && n.starts_with(G.prefix()))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl Bottleneck {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn, relu) in [(&self.conv1, &self.bn1, true), (&self.conv2, &self.bn2, true), (&self.conv3, &self.bn3, false)] {
            let c = conv.forward(g, h)?;
            h = bn.forward(g, c)?;
            if relu {
                h = g.tape.relu(h);
            }
        }
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let c = conv.forward(g, x)?;
                bn.forward(g, c)?
            }
            None => x,
        };
        let sum = g.tape.add(h, identity)?;
        Ok(g.tape.relu(sum))
    }
}

/// Per-channel input normalization applied before the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Normalization {
    pub fn apply<T: Scalar>(&self, images: &Tensor<T>) -> Tensor<T> {
        let mean: [T; 3] = self.mean.map(lit);
        let std: [T; 3] = self.std.map(lit);
        let s = images.shape();
        Tensor::from_fn(s, |n, c, y, x| (images.at(n, c, y, x) - mean[c]) / std[c])
    }
}

/// Runs the backbone in evaluation mode and detaches the pyramid.
pub fn extract_features<T: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<T>,
    normalized: &Tensor<T>,
) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::new(store, Mode::Eval, false);
    let x = g.tape.constant(normalized.clone());
    let pyr = backbone.forward(&mut g, x)?;
    Ok(FeaturePyramid { levels: pyr.levels.iter().map(|&v| g.tape.value(v).clone()).collect() })
}

/// Outcome of a successful weight load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub assigned: usize,
    /// Archive tensors with no backbone counterpart (e.g. a classifier head).
    pub unmatched: Vec<String>,
}

const ARCHIVE_PREFIXES: [&str; 5] = ["", "module.encoder_q.", "encoder_q.", "module.", "backbone."];

/// Assigns every backbone tensor from a named-tensor archive.
///
/// Nothing is written unless every backbone tensor is present with the
/// expected shape.
pub fn load_pretrained<T: Scalar>(backbone: &Backbone, store: &mut ParamStore<T>, path: &Path) -> Result<LoadReport> {
    let archive = read_archive::<T>(path)?;
    let names = backbone.tensor_names(store);
    let mut plan = Vec::with_capacity(names.len());
    let mut missing = Vec::new();
    let mut used = std::collections::HashSet::new();
    for name in &names {
        let local = name.strip_prefix(G.prefix()).expect("encoder prefix");
        let found = ARCHIVE_PREFIXES
            .iter()
            .map(|p| format!("{p}{local}"))
            .chain(std::iter::once(name.clone()))
            .find(|candidate| archive.tensors.contains_key(candidate));
        match found {
            None => missing.push(local.to_string()),
            Some(key) => {
                let entry = &archive.tensors[&key];
                let param = store.get(name)?;
                if entry.dims != param.dims {
                    return Err(Error::TensorShape {
                        name: key.clone(),
                        expected: param.dims.clone(),
                        found: entry.dims.clone(),
                    });
                }
                used.insert(key.clone());
                plan.push((name.clone(), key));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    for (name, key) in &plan {
        let values = archive.tensors[key].values.clone();
        let p = store.get_mut(name)?;
        let shape: Shape = p.value.shape();
        p.value = Tensor::from_vec(shape, values)?;
    }
    let unmatched: Vec<String> = archive.tensors.keys().filter(|k| !used.contains(*k)).cloned().collect();
    for u in &unmatched {
        log::info!("pretrained archive tensor `{u}` has no backbone counterpart");
    }
    Ok(LoadReport { assigned: plan.len(), unmatched })
}

/// Writes the backbone tensors in the archive naming scheme.
pub fn save_backbone<T: Scalar>(backbone: &Backbone, store: &ParamStore<T>, path: &Path) -> Result<()> {
    let names = backbone.tensor_names(store);
    let entries: Vec<(String, Vec<usize>, &[T])> = names
        .iter()
        .map(|n| {
            let p = store.get(n).expect("listed");
            (n.strip_prefix(G.prefix()).expect("prefix").to_string(), p.dims.clone(), p.value.data())
        })
        .collect();
    crate::archive::write_archive(path, &entries, Default::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Backbone, ParamStore<f64>) {
        let b = Backbone::new(BackboneKind::default()).unwrap();
        let mut store = ParamStore::new();
        b.register(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        (b, store)
    }

    #[test]
    fn toy_parameter_budget() {
        let (_, store) = toy();
        let n = store.trainable_count(ParamGroup::Encoder);
        assert!(n <= 100_000, "{n} parameters");
    }

    #[test]
    fn toy_level_sizes_follow_strides() {
        let (b, store) = toy();
        let x = Tensor::<f64>::full(Shape::new(1, 3, 64, 48), 0.1);
        let pyr = extract_features(&b, &store, &x).unwrap();
        for (lvl, (&(h, w), &c)) in pyr.levels.iter().zip(b.level_sizes(64, 48).iter().zip(&b.channels())) {
            assert_eq!(lvl.shape(), Shape::new(1, c, h, w));
        }
        assert_eq!(b.level_sizes(64, 48)[4], (4, 3));
    }

    #[test]
    fn resnet_strides_on_352() {
        let b = Backbone::new(BackboneKind::ResNet50).unwrap();
        assert_eq!(b.level_sizes(352, 352)[4], (11, 11));
        assert_eq!(b.channels()[4], 2048);
    }

    #[test]
    fn resnet_forward_shapes_small_input() {
        let b = Backbone::new(BackboneKind::ResNet50).unwrap();
        let mut store = ParamStore::<f32>::new();
        b.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::<f32>::full(Shape::new(1, 3, 64, 64), 0.2);
        let pyr = extract_features(&b, &store, &x).unwrap();
        let sizes: Vec<_> = pyr.levels.iter().map(|l| (l.shape().c, l.shape().h)).collect();
        assert_eq!(sizes, vec![(64, 32), (256, 16), (512, 8), (1024, 4), (2048, 2)]);
        assert!(pyr.levels.iter().all(Tensor::all_finite));
    }
}
