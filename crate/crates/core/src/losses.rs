//! Decoder supervision terms, loss weighting and the warm-up schedule.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction map so the training step can splice it into the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::types::CertaintyMask;

pub const BCE_EPS: f64 = 1e-7;

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn check_map<T: Scalar>(m: &Tensor<T>, what: &str) -> Result<()> {
    if m.shape().c != 1 {
        return Err(Error::Shape(format!("{what} must have one channel, got {}", m.shape())));
    }
    Ok(())
}

/// Cross-entropy over certain pixels, normalized by their count over the batch.
pub fn partial_bce<T: Scalar>(m: &Tensor<T>, mask: &CertaintyMask) -> Result<LossValue<T>> {
    check_map(m, "prediction")?;
    if mask.shape != m.shape() {
        return Err(Error::Shape(format!("mask {} vs prediction {}", mask.shape, m.shape())));
    }
    let mut grad = Tensor::zeros(m.shape());
    let count = mask.certain_count();
    if count == 0 {
        log::warn!("partial_bce: no certain pixels in batch");
        return Ok(LossValue { value: T::zero(), grad });
    }
    let eps = lit::<T>(BCE_EPS);
    let hi = T::one() - eps;
    let norm = lit::<T>(count as f64);
    let mut total = T::zero();
    for (i, &v) in m.data().iter().enumerate() {
        let Some(g) = mask.target::<T>(i) else { continue };
        let p = v.max(eps).min(hi);
        total -= g * p.ln() + (T::one() - g) * (T::one() - p).ln();
        if v > eps && v < hi {
            grad.data_mut()[i] = -(g / p - (T::one() - g) / (T::one() - p)) / norm;
        }
    }
    Ok(LossValue { value: total / norm, grad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LscParams {
    /// Side of the square window around each pixel (odd).
    pub kernel: usize,
    pub sigma_color: f64,
    pub sigma_space: f64,
}

impl Default for LscParams {
    fn default() -> Self {
        Self { kernel: 5, sigma_color: 0.1, sigma_space: 3.0 }
    }
}

/// Appearance-gated smoothness of the prediction inside a local window.
pub fn lsc_loss<T: Scalar>(m: &Tensor<T>, images: &Tensor<T>, params: &LscParams) -> Result<LossValue<T>> {
    check_map(m, "prediction")?;
    let (ms, is) = (m.shape(), images.shape());
    if ms.n != is.n || ms.h != is.h || ms.w != is.w {
        return Err(Error::Shape(format!("prediction {ms} vs image {is}")));
    }
    if params.kernel % 2 == 0 || params.sigma_color <= 0.0 || params.sigma_space <= 0.0 {
        return Err(Error::Config("lsc needs an odd window and positive bandwidths".into()));
    }
    let r = (params.kernel / 2) as isize;
    let (h, w) = (ms.h, ms.w);
    let inv_c = lit::<T>(1.0 / (2.0 * params.sigma_color * params.sigma_color));
    let inv_s = 1.0 / (2.0 * params.sigma_space * params.sigma_space);
    let norm = lit::<T>((h * w) as f64);
    let batch = lit::<T>(ms.n as f64);
    let mut grad = Tensor::zeros(ms);
    let mut total = T::zero();
    for n in 0..ms.n {
        let plane = m.plane(n, 0);
        let img = images.image(n);
        let hw = h * w;
        let mut sum = T::zero();
        let mut g = vec![T::zero(); hw];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if (dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        let color: T = (0..is.c)
                            .map(|c| {
                                let d = img[c * hw + i] - img[c * hw + j];
                                d * d
                            })
                            .sum();
                        let space = lit::<T>((dy * dy + dx * dx) as f64 * inv_s);
                        let f = (-(color * inv_c) - space).exp();
                        let diff = plane[i] - plane[j];
                        sum += diff.abs() * f;
                        // each unordered pair appears twice, once from each end
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[i] += lit::<T>(2.0) * sign * f;
                    }
                }
            }
        }
        total += sum / norm;
        for (dst, v) in grad.plane_mut(n, 0).iter_mut().zip(g) {
            *dst = v / (norm * batch);
        }
    }
    Ok(LossValue { value: total / batch, grad })
}

/// `1 − Σ M·G / Σ (M + G − M·G)` per image, averaged over the batch.
pub fn iou_loss<T: Scalar>(m: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue<T>> {
    check_map(m, "prediction")?;
    m.check_same(target)?;
    let s = m.shape();
    let batch = lit::<T>(s.n as f64);
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for n in 0..s.n {
        let (mp, gp) = (m.plane(n, 0), target.plane(n, 0));
        let inter: T = mp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        let union: T = mp.iter().zip(gp).map(|(&a, &b)| a + b - a * b).sum();
        if union <= T::zero() {
            continue;
        }
        total += T::one() - inter / union;
        let u2 = union * union;
        for (dst, &b) in grad.plane_mut(n, 0).iter_mut().zip(gp) {
            *dst = -(b * union - inter * (T::one() - b)) / (u2 * batch);
        }
    }
    Ok(LossValue { value: total / batch, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LossWeights {
    pub const WARMUP: Self = Self { alpha: 1.0, beta1: 0.0, beta2: 0.0 };
    pub const MAIN: Self = Self { alpha: 0.1, beta1: 1.0, beta2: 0.1 };

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta1, self.beta2].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSchedule {
    pub warmup: LossWeights,
    pub main: LossWeights,
    pub warmup_epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self { warmup: LossWeights::WARMUP, main: LossWeights::MAIN, warmup_epochs: 1 }
    }
}

impl LossSchedule {
    /// Weights for a zero-based epoch index.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        if self.in_warmup(epoch) {
            self.warmup
        } else {
            self.main
        }
    }

    pub fn in_warmup(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents<T> {
    pub sosl: T,
    pub pbce: T,
    pub lsc: T,
    pub iou: T,
}

impl<T: Scalar> LossComponents<T> {
    pub fn all_finite(&self) -> bool {
        [self.sosl, self.pbce, self.lsc, self.iou].iter().all(|v| v.is_finite())
    }
}

/// `α·sosl + β1·(pbce + lsc) + β2·iou`.
pub fn total_loss<T: Scalar>(c: &LossComponents<T>, weights: &LossWeights) -> Result<T> {
    weights.validate()?;
    for (name, v) in [("sosl", c.sosl), ("pbce", c.pbce), ("lsc", c.lsc), ("iou", c.iou)] {
        if v < T::zero() {
            return Err(Error::Contract(format!("{name} loss is negative: {v}")));
        }
    }
    Ok(lit::<T>(weights.alpha) * c.sosl + lit::<T>(weights.beta1) * (c.pbce + c.lsc) + lit::<T>(weights.beta2) * c.iou)
}

/// Which pseudo-label a supervision term reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Location,
    Detailed,
}

/// Wiring of the decoder terms; the default pairs pbce with the location
/// label and iou with the detailed label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossRecipe {
    pub pbce: Option<LabelSource>,
    pub iou: Option<LabelSource>,
    pub lsc: bool,
}

impl Default for LossRecipe {
    fn default() -> Self {
        Self::preset("C2").expect("known preset")
    }
}

impl LossRecipe {
    pub const PRESETS: [&'static str; 8] = ["A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2"];

    pub fn preset(name: &str) -> Option<Self> {
        use LabelSource::{Detailed as D, Location as L};
        let (pbce, iou, lsc) = match name.to_ascii_uppercase().as_str() {
            "A1" => (L, None, true),
            "A2" => (L, Some(L), false),
            "A3" => (L, Some(L), true),
            "B1" => (D, None, true),
            "B2" => (D, Some(D), false),
            "B3" => (D, Some(D), true),
            "C1" => (D, Some(L), true),
            "C2" => (L, Some(D), true),
            _ => return None,
        };
        Some(Self { pbce: Some(pbce), iou, lsc })
    }

    pub fn describe(&self) -> String {
        let tag = |s: LabelSource| match s {
            LabelSource::Location => "G",
            LabelSource::Detailed => "G_r",
        };
        let mut parts = Vec::new();
        if let Some(s) = self.pbce {
            parts.push(format!("pbce({})", tag(s)));
        }
        if let Some(s) = self.iou {
            parts.push(format!("iou({})", tag(s)));
        }
        if self.lsc {
            parts.push("lsc".to_string());
        }
        parts.join(" + ")
    }
}
