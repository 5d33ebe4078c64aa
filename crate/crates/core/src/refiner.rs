//! Pixel-adaptive refinement of coarse location labels.
//!
//! Each pixel's new value is an affinity-weighted average of its eight
//! neighbours' label values; the affinity mixes an appearance kernel and a
//! position kernel, each softmax-normalized over the neighbourhood. The
//! averaged map is then multiplied element-wise with the previous label.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

pub const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityKernelParams {
    /// Appearance smoothness.
    pub gamma_appearance: f64,
    /// Position smoothness.
    pub gamma_position: f64,
    /// Weight of the position kernel relative to the appearance kernel.
    pub position_weight: f64,
    pub iterations: usize,
    /// Resolution factor at which refinement runs inside the pipeline.
    pub scale: f64,
    /// Rescale to max 1 afterwards when the input was confident somewhere.
    pub renormalize: bool,
}

impl Default for AffinityKernelParams {
    fn default() -> Self {
        Self {
            gamma_appearance: 0.4,
            gamma_position: 0.4,
            position_weight: 0.01,
            iterations: 5,
            scale: 0.5,
            renormalize: true,
        }
    }
}

impl AffinityKernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_appearance > 0.0 && self.gamma_position > 0.0) {
            return Err(Error::Config("refiner smoothness values must be positive".into()));
        }
        if !(self.position_weight >= 0.0) {
            return Err(Error::Config("refiner position weight must be non-negative".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("refiner needs at least one iteration".into()));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config("refiner scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Normalizers of the two distance terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityScales<T> {
    pub sigma_appearance: T,
    pub sigma_position: T,
}

impl<T: Scalar> AffinityScales<T> {
    /// Standard deviation of the image's appearance values and of the
    /// neighbour offset lengths, each floored at 1e-6.
    pub fn estimate(image: &[T]) -> Self {
        let n = lit::<T>(image.len().max(1) as f64);
        let mean = image.iter().copied().sum::<T>() / n;
        let var = image.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let offsets: Vec<f64> = NEIGHBOURS.iter().map(|&(dy, dx)| ((dy * dy + dx * dx) as f64).sqrt()).collect();
        let om = offsets.iter().sum::<f64>() / offsets.len() as f64;
        let ov = offsets.iter().map(|o| (o - om) * (o - om)).sum::<f64>() / offsets.len() as f64;
        let floor = lit::<T>(SIGMA_FLOOR);
        Self { sigma_appearance: var.sqrt().max(floor), sigma_position: lit::<T>(ov.sqrt()).max(floor) }
    }
}

/// One colour image (`C` planes of `h×w`) in planar layout.
#[derive(Clone, Copy, Debug)]
pub struct Appearance<'a, T> {
    pub data: &'a [T],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a, T: Scalar> Appearance<'a, T> {
    pub fn from_image(image: &'a Tensor<T>, n: usize) -> Self {
        let s = image.shape();
        Self { data: image.image(n), channels: s.c, height: s.h, width: s.w }
    }

    fn distance_sq(&self, a: usize, b: usize) -> T {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| {
                let d = self.data[c * plane + a] - self.data[c * plane + b];
                d * d
            })
            .sum()
    }
}

/// `(d_f, d_p)` between pixels `i` and `j`, both `≤ 0`.
pub fn pairwise_distances<T: Scalar>(
    image: &Appearance<'_, T>,
    i: (usize, usize),
    j: (usize, usize),
    scales: &AffinityScales<T>,
    params: &AffinityKernelParams,
) -> Result<(T, T)> {
    for &(y, x) in &[i, j] {
        if y >= image.height || x >= image.width {
            return Err(Error::Contract(format!("pixel ({y}, {x}) outside {}×{}", image.height, image.width)));
        }
    }
    let (a, b) = (i.0 * image.width + i.1, j.0 * image.width + j.1);
    let feat = image.distance_sq(a, b).sqrt() / (lit::<T>(params.gamma_appearance) * scales.sigma_appearance);
    let dy = i.0 as f64 - j.0 as f64;
    let dx = i.1 as f64 - j.1 as f64;
    let pos = lit::<T>((dy * dy + dx * dx).sqrt()) / (lit::<T>(params.gamma_position) * scales.sigma_position);
    Ok((-(feat * feat), -(pos * pos)))
}

/// Neighbour weights `κ_ij` for every pixel; out-of-image neighbours get 0.
#[derive(Clone, Debug)]
pub struct AffinityKernel<T> {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<[T; 8]>,
}

fn softmax_masked<T: Scalar>(logits: &[T; 8], valid: &[bool; 8]) -> [T; 8] {
    let max = logits.iter().zip(valid).filter(|(_, &v)| v).map(|(&l, _)| l).fold(T::neg_infinity(), T::max);
    let mut out = [T::zero(); 8];
    let mut total = T::zero();
    for k in 0..8 {
        if valid[k] {
            out[k] = (logits[k] - max).exp();
            total += out[k];
        }
    }
    if total > T::zero() {
        for v in &mut out {
            *v /= total;
        }
    }
    out
}

impl<T: Scalar> AffinityKernel<T> {
    pub fn build(image: &Appearance<'_, T>, params: &AffinityKernelParams) -> Self {
        let scales = AffinityScales::estimate(image.data);
        Self::build_with(image, &scales, params)
    }

    pub fn build_with(image: &Appearance<'_, T>, scales: &AffinityScales<T>, params: &AffinityKernelParams) -> Self {
        let (h, w) = (image.height, image.width);
        let gamma3 = lit::<T>(params.position_weight);
        let mut weights = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut df = [T::neg_infinity(); 8];
                let mut dp = [T::neg_infinity(); 8];
                let mut valid = [false; 8];
                for (k, &(oy, ox)) in NEIGHBOURS.iter().enumerate() {
                    let (ny, nx) = (y as isize + oy, x as isize + ox);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (f, p) = pairwise_distances(image, (y, x), (ny as usize, nx as usize), scales, params)
                        .expect("in-range neighbour");
                    df[k] = f;
                    dp[k] = p;
                    valid[k] = true;
                }
                let sf = softmax_masked(&df, &valid);
                let sp = softmax_masked(&dp, &valid);
                let mut row = [T::zero(); 8];
                for k in 0..8 {
                    row[k] = (sf[k] + gamma3 * sp[k]) / (T::one() + gamma3);
                }
                weights.push(row);
            }
        }
        Self { height: h, width: w, weights }
    }
}

/// One affinity average followed by the element-wise merge with `label`.
pub fn refine_step<T: Scalar>(label: &[T], kernel: &AffinityKernel<T>) -> Vec<T> {
    let (h, w) = (kernel.height, kernel.width);
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let row = &kernel.weights[i];
            let mut avg = T::zero();
            for (k, &(oy, ox)) in NEIGHBOURS.iter().enumerate() {
                if row[k] == T::zero() {
                    continue;
                }
                let j = (y as isize + oy) as usize * w + (x as isize + ox) as usize;
                avg += row[k] * label[j];
            }
            out[i] = (avg * label[i]).max(T::zero()).min(T::one());
        }
    }
    out
}

/// `iterations` refinement steps without renormalization.
pub fn refine_iterations<T: Scalar>(label: &[T], kernel: &AffinityKernel<T>, iterations: usize) -> Vec<T> {
    let mut cur = label.to_vec();
    for _ in 0..iterations {
        cur = refine_step(&cur, kernel);
    }
    cur
}

/// Refines a single `h×w` label against its appearance image.
pub fn refine_plane<T: Scalar>(
    label: &[T],
    image: &Appearance<'_, T>,
    params: &AffinityKernelParams,
    theta_f: T,
) -> Vec<T> {
    let kernel = AffinityKernel::build(image, params);
    let before = label.iter().copied().fold(T::zero(), T::max);
    let mut out = refine_iterations(label, &kernel, params.iterations);
    if params.renormalize && before >= theta_f {
        let after = out.iter().copied().fold(T::zero(), T::max);
        if after > T::zero() {
            out.iter_mut().for_each(|v| *v = (*v / after).min(T::one()));
        }
    }
    out
}

/// Refines `N×1×H×W` labels against `N×C×H×W` images on the same grid.
pub fn refine<T: Scalar>(labels: &Tensor<T>, images: &Tensor<T>, params: &AffinityKernelParams, theta_f: T) -> Result<Tensor<T>> {
    params.validate()?;
    let (ls, is) = (labels.shape(), images.shape());
    if ls.c != 1 || ls.n != is.n || ls.h != is.h || ls.w != is.w {
        return Err(Error::Shape(format!("label {ls} and image {is} are not on the same grid")));
    }
    let planes: Vec<Vec<T>> = (0..ls.n)
        .into_par_iter()
        .map(|n| refine_plane(labels.plane(n, 0), &Appearance::from_image(images, n), params, theta_f))
        .collect();
    Tensor::from_vec(ls, planes.concat())
}

/// Refinement at `params.scale` of the input resolution, resampled back.
pub fn refine_scaled<T: Scalar>(labels: &Tensor<T>, images: &Tensor<T>, params: &AffinityKernelParams, theta_f: T) -> Result<Tensor<T>> {
    params.validate()?;
    let s: Shape = labels.shape();
    if params.scale >= 1.0 {
        return refine(labels, images, params, theta_f);
    }
    let h = ((s.h as f64 * params.scale).round() as usize).max(2);
    let w = ((s.w as f64 * params.scale).round() as usize).max(2);
    let small = refine(&labels.resize_bilinear(h, w), &images.resize_bilinear(h, w), params, theta_f)?;
    Ok(small.resize_bilinear(s.h, s.w).map(|v| v.max(T::zero()).min(T::one())))
}
