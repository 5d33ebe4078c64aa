//! Class-agnostic self-localization and its cross-image contrastive loss.
//!
//! The activation head squashes a batch-normalized 1×1 projection of the
//! concatenated two deepest pyramid levels into a single-channel map. Pooling
//! features under that map (and under its complement) yields one foreground
//! and one background descriptor per image; the loss pulls foreground
//! descriptors of different images together, does the same for background
//! descriptors, and pushes every foreground/background pair apart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, Init, ParamGroup, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

/// Clamp applied inside every logarithm of the contrastive loss.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    /// Smoothness of the rank weighting `exp(-alpha_rank · rank)`.
    pub alpha_rank: f64,
    /// Input scales whose activation maps are max-fused.
    pub scales: Vec<f64>,
    /// Stretch each image's location label to span `[0, 1]`.
    pub stretch_labels: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { alpha_rank: 0.25, scales: vec![1.0, 0.5, 1.5], stretch_labels: true }
    }
}

#[derive(Clone, Debug)]
pub struct ActivationHead {
    pub proj: Conv2d,
    pub norm: BatchNorm2d,
}

impl ActivationHead {
    pub fn new(deep_channels: usize, deepest_channels: usize) -> Self {
        let g = ParamGroup::Localizer;
        Self {
            proj: Conv2d::new("localizer.proj", deep_channels + deepest_channels, 1, 1, g),
            norm: BatchNorm2d::new("localizer.bn", 1, g),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.proj.in_channels
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.proj.register(store, Init::KaimingNormal, rng);
        self.norm.register(store);
    }

    /// `F4 ⊕ upsample(F5)` on the grid of `F4`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, f4: Var, f5: Var) -> Result<Var> {
        let s4 = g.tape.shape(f4);
        let up = g.tape.resize_bilinear(f5, s4.h, s4.w);
        let cat = g.tape.concat_channels(&[f4, up])?;
        let c = g.tape.shape(cat).c;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "activation head expects {} input channels, pyramid supplies {c}",
                self.in_channels()
            )));
        }
        Ok(cat)
    }

    /// Activation map in `(0, 1)` computed from the concatenated features.
    pub fn activation<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let p = self.proj.forward(g, features)?;
        let b = self.norm.forward(g, p)?;
        Ok(g.tape.sigmoid(b))
    }
}

/// Resizes every map onto `h×w` and takes the per-pixel maximum.
pub fn multiscale_fuse<T: Scalar>(maps: &[Tensor<T>], expected: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if maps.len() < expected || maps.is_empty() {
        return Err(Error::Contract(format!("expected {expected} activation maps, got {}", maps.len())));
    }
    let resized: Vec<Tensor<T>> = maps.iter().map(|m| m.resize_bilinear(h, w)).collect();
    let mut out = resized[0].clone();
    for m in &resized[1..] {
        out = out.zip_map(m, T::max)?;
    }
    Ok(out)
}

/// Tape version of [`multiscale_fuse`].
pub fn multiscale_fuse_on_tape<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], expected: usize, h: usize, w: usize) -> Result<Var> {
    if maps.len() < expected || maps.is_empty() {
        return Err(Error::Contract(format!("expected {expected} activation maps, got {}", maps.len())));
    }
    let resized: Vec<Var> = maps.iter().map(|&m| tape.resize_bilinear(m, h, w)).collect();
    if resized.len() == 1 {
        return Ok(resized[0]);
    }
    tape.maximum(&resized)
}

/// Foreground and background descriptors, one row of `d` values per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDescriptors<T> {
    pub fg: Vec<Vec<T>>,
    pub bg: Vec<Vec<T>>,
}

/// Activation-weighted sums of feature columns (unnormalized).
pub fn split_samples<T: Scalar>(map: &Tensor<T>, features: &Tensor<T>) -> Result<SampleDescriptors<T>> {
    let (ms, fs) = (map.shape(), features.shape());
    if ms.c != 1 || ms.n != fs.n || ms.h != fs.h || ms.w != fs.w {
        return Err(Error::Shape(format!("activation map {ms} is not on the feature grid {fs}")));
    }
    let mut fg = Vec::with_capacity(fs.n);
    let mut bg = Vec::with_capacity(fs.n);
    for n in 0..fs.n {
        let m = map.plane(n, 0);
        let row = |weight: &dyn Fn(T) -> T| -> Vec<T> {
            (0..fs.c).map(|c| m.iter().zip(features.plane(n, c)).map(|(&g, &f)| weight(g) * f).sum()).collect()
        };
        fg.push(row(&|g| g));
        bg.push(row(&|g| T::one() - g));
    }
    Ok(SampleDescriptors { fg, bg })
}

/// Pairs of `(i, j)` batch indices together with their cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySet<T> {
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<T>,
}

impl<T> SimilaritySet<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySets<T> {
    /// Foreground–foreground, `i ≠ j`.
    pub fg: SimilaritySet<T>,
    /// Background–background, `i ≠ j`.
    pub bg: SimilaritySet<T>,
    /// Foreground `i` against background `j`, all pairs.
    pub fb: SimilaritySet<T>,
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine similarity; a zero-norm operand yields 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    (dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grad<T: Scalar>(a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    let cos = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - cos * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x / (na * nb) - cos * y / (nb * nb)).collect();
    (ga, gb)
}

fn set_from<T: Scalar>(left: &[Vec<T>], right: &[Vec<T>], include_diagonal: bool) -> SimilaritySet<T> {
    let n = left.len();
    let mut pairs = Vec::new();
    let mut values = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j && !include_diagonal {
                continue;
            }
            pairs.push((i, j));
            values.push(cosine(&left[i], &right[j]));
        }
    }
    SimilaritySet { pairs, values }
}

pub fn similarity_sets<T: Scalar>(samples: &SampleDescriptors<T>) -> SimilaritySets<T> {
    let degenerate = samples.fg.iter().chain(&samples.bg).filter(|v| norm(v) == T::zero()).count();
    if degenerate > 0 {
        log::warn!("{degenerate} zero-norm descriptors; their similarities are set to 0");
    }
    SimilaritySets {
        fg: set_from(&samples.fg, &samples.fg, false),
        bg: set_from(&samples.bg, &samples.bg, false),
        fb: set_from(&samples.fg, &samples.bg, true),
    }
}

fn clamp_neg<T: Scalar>(s: T) -> (T, bool) {
    let eps = lit::<T>(LOG_EPS);
    let hi = T::one() - eps;
    if s < eps {
        (eps, false)
    } else if s > hi {
        (hi, false)
    } else {
        (s, true)
    }
}

/// `-mean(log(1 - S))` with `S` clamped into `[ε, 1-ε]`.
pub fn negative_loss<T: Scalar>(values: &[T]) -> Result<T> {
    Ok(negative_loss_grad(values)?.0)
}

fn negative_loss_grad<T: Scalar>(values: &[T]) -> Result<(T, Vec<T>)> {
    if values.is_empty() {
        return Err(Error::Contract("negative loss over an empty similarity set".into()));
    }
    let m = lit::<T>(values.len() as f64);
    let mut loss = T::zero();
    let grad = values
        .iter()
        .map(|&s| {
            let (c, live) = clamp_neg(s);
            loss -= (T::one() - c).ln();
            if live {
                T::one() / ((T::one() - c) * m)
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss / m, grad))
}

/// 0-based positions in descending order of similarity (ties by index).
pub fn similarity_ranks<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Rank weights `exp(-alpha · rank)`.
pub fn rank_weights<T: Scalar>(values: &[T], alpha_rank: f64) -> Vec<T> {
    similarity_ranks(values).into_iter().map(|r| lit::<T>((-alpha_rank * r as f64).exp())).collect()
}

/// `-mean(H(S) · log S)` with negative or tiny similarities clamped to ε.
pub fn positive_loss<T: Scalar>(values: &[T], alpha_rank: f64) -> Result<T> {
    Ok(positive_loss_grad(values, alpha_rank)?.0)
}

fn positive_loss_grad<T: Scalar>(values: &[T], alpha_rank: f64) -> Result<(T, Vec<T>)> {
    if values.is_empty() {
        return Err(Error::Contract("positive loss over an empty similarity set".into()));
    }
    let eps = lit::<T>(LOG_EPS);
    let m = lit::<T>(values.len() as f64);
    let weights = rank_weights(values, alpha_rank);
    let mut loss = T::zero();
    let grad = values
        .iter()
        .zip(&weights)
        .map(|(&s, &h)| {
            let c = s.max(eps);
            loss -= h * c.ln();
            if s > eps {
                -h / (c * m)
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss / m, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoslTerms<T> {
    pub pos_fg: T,
    pub pos_bg: T,
    pub neg: T,
}

impl<T: Scalar> SoslTerms<T> {
    pub fn total(&self) -> T {
        self.pos_fg + self.pos_bg + self.neg
    }
}

/// `L_POS(S_fg) + L_POS(S_bg) + L_NEG(S_fb)`.
///
/// With a single image there are no cross-image positive pairs; both
/// positive terms are then zero.
pub fn sosl_loss<T: Scalar>(sets: &SimilaritySets<T>, alpha_rank: f64) -> Result<SoslTerms<T>> {
    let (pos_fg, pos_bg) = if sets.fg.is_empty() {
        log::warn!("contrastive loss on a single image: positive terms skipped");
        (T::zero(), T::zero())
    } else {
        (positive_loss(&sets.fg.values, alpha_rank)?, positive_loss(&sets.bg.values, alpha_rank)?)
    };
    Ok(SoslTerms { pos_fg, pos_bg, neg: negative_loss(&sets.fb.values)? })
}

fn descriptor_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<T>> {
    let s = t.shape();
    (0..s.n).map(|n| t.image(n).to_vec()).collect()
}

/// Records the contrastive loss on the tape from `N×d×1×1` descriptor nodes.
pub fn sosl_on_tape<T: Scalar>(tape: &mut Tape<T>, fg: Var, bg: Var, alpha_rank: f64) -> Result<(Var, SoslTerms<T>)> {
    let samples = SampleDescriptors { fg: descriptor_rows(tape.value(fg)), bg: descriptor_rows(tape.value(bg)) };
    let sets = similarity_sets(&samples);
    let shape: Shape = tape.shape(fg);
    let d = shape.c;
    let mut gfg = vec![vec![T::zero(); d]; shape.n];
    let mut gbg = vec![vec![T::zero(); d]; shape.n];

    let mut accumulate = |set: &SimilaritySet<T>, dl_ds: &[T], left_fg: bool, right_fg: bool| {
        for (&(i, j), &g) in set.pairs.iter().zip(dl_ds) {
            if g == T::zero() {
                continue;
            }
            let a = if left_fg { &samples.fg[i] } else { &samples.bg[i] };
            let b = if right_fg { &samples.fg[j] } else { &samples.bg[j] };
            let (ga, gb) = cosine_grad(a, b);
            let left = if left_fg { &mut gfg[i] } else { &mut gbg[i] };
            for (o, v) in left.iter_mut().zip(&ga) {
                *o += g * *v;
            }
            let right = if right_fg { &mut gfg[j] } else { &mut gbg[j] };
            for (o, v) in right.iter_mut().zip(&gb) {
                *o += g * *v;
            }
        }
    };

    let (neg, dneg) = negative_loss_grad(&sets.fb.values)?;
    accumulate(&sets.fb, &dneg, true, false);
    let (mut pos_fg, mut pos_bg) = (T::zero(), T::zero());
    if sets.fg.is_empty() {
        log::warn!("contrastive loss on a single image: positive terms skipped");
    } else {
        let (pf, dpf) = positive_loss_grad(&sets.fg.values, alpha_rank)?;
        let (pb, dpb) = positive_loss_grad(&sets.bg.values, alpha_rank)?;
        accumulate(&sets.fg, &dpf, true, true);
        accumulate(&sets.bg, &dpb, false, false);
        pos_fg = pf;
        pos_bg = pb;
    }
    let terms = SoslTerms { pos_fg, pos_bg, neg };
    let jf = Tensor::from_vec(shape, gfg.concat())?;
    let jb = Tensor::from_vec(shape, gbg.concat())?;
    let v = tape.local(terms.total(), &[fg, bg], vec![jf, jb])?;
    Ok((v, terms))
}

/// Contrastive loss from an activation map and features on the same grid.
pub fn sosl_from_map<T: Scalar>(tape: &mut Tape<T>, map: Var, features: Var, alpha_rank: f64) -> Result<(Var, SoslTerms<T>)> {
    let fg = tape.weighted_pool(map, features)?;
    let inv = tape.affine(map, -T::one(), T::one());
    let bg = tape.weighted_pool(inv, features)?;
    sosl_on_tape(tape, fg, bg, alpha_rank)
}

/// Mean over the one-pixel border and over the central half-size crop.
pub fn border_and_center_means<T: Scalar>(plane: &[T], h: usize, w: usize) -> (T, T) {
    let (mut border, mut nb) = (T::zero(), 0usize);
    let (mut center, mut nc) = (T::zero(), 0usize);
    let (y0, x0) = (h / 4, w / 4);
    let (y1, x1) = (y0 + (h / 2).max(1), x0 + (w / 2).max(1));
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                border += v;
                nb += 1;
            }
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                center += v;
                nc += 1;
            }
        }
    }
    (border / lit(nb.max(1) as f64), center / lit(nc.max(1) as f64))
}

/// Affine per-image rescale of `N×1×H×W` maps onto `[0, 1]`; constant
/// maps are left as they are.
pub fn stretch_maps<T: Scalar>(maps: &Tensor<T>) -> Tensor<T> {
    let s = maps.shape();
    let mut out = maps.clone();
    for n in 0..s.n {
        let plane = out.plane_mut(n, 0);
        let lo = plane.iter().copied().fold(T::infinity(), T::min);
        let hi = plane.iter().copied().fold(T::neg_infinity(), T::max);
        if hi > lo {
            let span = hi - lo;
            plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
        }
    }
    out
}

/// Inverts the map of every image whose border is brighter than its centre.
///
/// Returns the oriented maps and which images were flipped.
pub fn orient_foreground<T: Scalar>(maps: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let s = maps.shape();
    let mut out = maps.clone();
    let mut flipped = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let (border, center) = border_and_center_means(maps.plane(n, 0), s.h, s.w);
        let flip = border > center;
        if flip {
            for v in out.plane_mut(n, 0) {
                *v = T::one() - *v;
            }
        }
        flipped.push(flip);
    }
    (out, flipped)
}
