//! Named parameters, forward-pass context, and the two layer types the
//! networks are built from.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

/// Parameter groups carry separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Localizer,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Localizer, ParamGroup::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder.",
            ParamGroup::Localizer => "localizer.",
            ParamGroup::Decoder => "decoder.",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Shape as stored in weight archives (e.g. `[C]` for a batch-norm scale).
    pub dims: Vec<usize>,
    pub group: ParamGroup,
    /// Buffers (running statistics) are not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars in `group`.
    pub fn trainable_count(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable && p.group == group)
            .map(|p| p.value.shape().len())
            .sum()
    }

    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats<T>)], momentum: T) -> Result<()> {
        for (prefix, stats) in updates {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let p = self.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &v) in p.value.data_mut().iter_mut().zip(values.iter()) {
                    *r = (T::one() - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }
}

/// How batch-norm layers pick their statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics everywhere except an encoder whose normalization is frozen.
    Train { encoder_batch_stats: bool },
    Eval,
}

/// One forward pass: the tape plus the parameter leaves created so far.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    grad: bool,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, grad: bool) -> Self {
        Self { tape: Tape::new(), store, vars: HashMap::new(), mode, grad, bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Leaf for a named parameter, shared across repeated uses in the pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = if self.grad && p.trainable {
            self.tape.variable(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created during this pass, by name.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    fn uses_batch_stats(&self, group: ParamGroup) -> bool {
        match self.mode {
            Mode::Eval => false,
            Mode::Train { encoder_batch_stats } => group != ParamGroup::Encoder || encoder_batch_stats,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal over fan-in.
    KaimingNormal,
    Zeros,
}

fn sample_tensor<T: Scalar, R: Rng>(shape: Shape, init: Init, fan_in: usize, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::KaimingNormal => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_, _, _, _| lit(normal.sample(rng)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub group: ParamGroup,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, group: ParamGroup) -> Self {
        Self { name: name.into(), in_channels, out_channels, kernel, stride: 1, pad: kernel / 2, bias: false, group }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, init: Init, rng: &mut R) {
        let shape = Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel);
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            Param {
                value: sample_tensor(shape, init, fan_in, rng),
                dims: shape.dims().to_vec(),
                group: self.group,
                trainable: true,
            },
        );
        if self.bias {
            store.insert(
                format!("{}.bias", self.name),
                Param {
                    value: Tensor::zeros(Shape::new(1, self.out_channels, 1, 1)),
                    dims: vec![self.out_channels],
                    group: self.group,
                    trainable: true,
                },
            );
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = if self.bias { Some(g.param(&format!("{}.bias", self.name))?) } else { None };
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub group: ParamGroup,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, channels: usize, group: ParamGroup) -> Self {
        Self { name: name.into(), channels, group }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let shape = Shape::new(1, self.channels, 1, 1);
        let entries = [
            ("weight", T::one(), true),
            ("bias", T::zero(), true),
            ("running_mean", T::zero(), false),
            ("running_var", T::one(), false),
        ];
        for (suffix, fill, trainable) in entries {
            store.insert(
                format!("{}.{suffix}", self.name),
                Param { value: Tensor::full(shape, fill), dims: vec![self.channels], group: self.group, trainable },
            );
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{}.weight", self.name))?;
        let beta = g.param(&format!("{}.bias", self.name))?;
        if g.uses_batch_stats(self.group) {
            let (y, stats) = g.tape.batch_norm(x, gamma, beta, None, lit(Self::EPS))?;
            if let Some(stats) = stats {
                g.bn_updates.push((self.name.clone(), stats));
            }
            Ok(y)
        } else {
            let rm = g.store.get(&format!("{}.running_mean", self.name))?.value.data().to_vec();
            let rv = g.store.get(&format!("{}.running_var", self.name))?.value.data().to_vec();
            let (y, _) = g.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), lit(Self::EPS))?;
            Ok(y)
        }
    }
}
