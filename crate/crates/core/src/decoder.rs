//! Top-down saliency decoder over the five pyramid levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, Mode, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Lateral width every level is projected to.
    pub width: usize,
    pub levels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { width: 64, levels: LEVELS }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    laterals: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
    head: Conv2d,
}

const G: ParamGroup = ParamGroup::Decoder;

impl Decoder {
    /// `channels` lists the pyramid widths, finest first.
    pub fn new(config: DecoderConfig, channels: &[usize]) -> Result<Self> {
        if config.width == 0 || config.levels == 0 || config.levels > channels.len() {
            return Err(Error::Config(format!(
                "decoder needs width > 0 and 1..={} levels, got {config:?}",
                channels.len()
            )));
        }
        let first = channels.len() - config.levels;
        let laterals = channels[first..]
            .iter()
            .enumerate()
            .map(|(k, &c)| Conv2d::new(format!("decoder.lateral{}", first + k + 1), c, config.width, 1, G).with_bias())
            .collect();
        let fuse = (first..channels.len() - 1)
            .map(|k| Conv2d::new(format!("decoder.fuse{}", k + 1), config.width, config.width, 3, G).with_bias())
            .collect();
        let head = Conv2d::new("decoder.head", config.width, 1, 1, G).with_bias();
        Ok(Self { config, laterals, fuse, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for conv in self.laterals.iter().chain(&self.fuse) {
            conv.register(store, Init::KaimingNormal, rng);
        }
        self.head.register(store, Init::Zeros, rng);
    }

    /// Saliency logits and probabilities at `out_h × out_w`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pyramid: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        if pyramid.len() != LEVELS {
            return Err(Error::Shape(format!("expected {LEVELS} pyramid levels, got {}", pyramid.len())));
        }
        let used = &pyramid[LEVELS - self.config.levels..];
        let mut top = self.laterals[used.len() - 1].forward(g, used[used.len() - 1])?;
        for k in (0..used.len() - 1).rev() {
            let lateral = self.laterals[k].forward(g, used[k])?;
            let s = g.tape.shape(lateral);
            let up = g.tape.resize_bilinear(top, s.h, s.w);
            let merged = g.tape.add(up, lateral)?;
            let fused = self.fuse[k].forward(g, merged)?;
            top = g.tape.relu(fused);
        }
        let logits = self.head.forward(g, top)?;
        let prob = g.tape.sigmoid(logits);
        Ok(g.tape.resize_bilinear(prob, out_h, out_w))
    }
}

/// Eval-mode decoding of a detached pyramid.
pub fn decode<T: Scalar>(decoder: &Decoder, store: &ParamStore<T>, levels: &[Tensor<T>], out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new(store, Mode::Eval, false);
    let vars: Vec<Var> = levels.iter().map(|t| g.tape.constant(t.clone())).collect();
    let out = decoder.forward(&mut g, &vars, out_h, out_w)?;
    Ok(g.tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pyramid_gives_half() {
        let channels = [4, 5, 6, 7, 8];
        let dec = Decoder::new(DecoderConfig { width: 8, levels: 5 }, &channels).unwrap();
        let mut store = ParamStore::<f64>::new();
        dec.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let levels: Vec<Tensor<f64>> = (0..5)
            .map(|k| Tensor::zeros(Shape::new(2, channels[k], 32 >> k, 32 >> k)))
            .collect();
        let out = decode(&dec, &store, &levels, 32, 32).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 1, 32, 32));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_level_count_is_rejected() {
        let dec = Decoder::new(DecoderConfig { width: 4, levels: 5 }, &[2, 2, 2, 2, 2]).unwrap();
        let mut store = ParamStore::<f32>::new();
        dec.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let levels = vec![Tensor::zeros(Shape::new(1, 2, 8, 8)); 4];
        assert!(decode(&dec, &store, &levels, 8, 8).is_err());
    }
}
