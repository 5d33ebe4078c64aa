use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{list_images, load_rgb, save_gray, save_rgb, stem};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

use super::config::AugmentConfig;

/// Name of the mask directory that sits next to the images of a dataset.
pub const GT_DIR: &str = "gt";

/// Deterministic generator for one `(seed, epoch, index)` triple.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

/// Order in which an epoch visits the dataset.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut sample_rng(seed, epoch as u64, u64::MAX));
    order
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<PathBuf>,
}

impl Dataset {
    /// Lists the images of a flat directory; masks in `gt/` are not touched.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let images = list_images(root)?;
        if images.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.root.join(GT_DIR)
    }

    pub fn name(&self, index: usize) -> String {
        stem(&self.images[index])
    }

    pub fn load<T: Scalar>(&self, index: usize) -> Result<Tensor<T>> {
        load_rgb(&self.images[index])
    }

    /// Augmented training batch for the given dataset indices.
    pub fn training_batch<T: Scalar>(
        &self,
        indices: &[usize],
        size: usize,
        augment: &AugmentConfig,
        seed: u64,
        epoch: usize,
    ) -> Result<Tensor<T>> {
        let images = indices
            .par_iter()
            .map(|&i| {
                let img = self.load::<T>(i)?;
                let mut rng = sample_rng(seed, epoch as u64, i as u64);
                Ok(augment_image(&img, augment, size, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&images)
    }

    /// Plain resized batch, used for labelling and evaluation.
    pub fn resized_batch<T: Scalar>(&self, indices: &[usize], size: usize) -> Result<Tensor<T>> {
        let images = indices
            .par_iter()
            .map(|&i| Ok(self.load::<T>(i)?.resize_bilinear(size, size)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&images)
    }
}

/// Crop window `(y0, x0, h, w)` covering `area` of an `h×w` source at its aspect ratio.
pub fn crop_window<R: Rng>(h: usize, w: usize, area: f64, rng: &mut R) -> (usize, usize, usize, usize) {
    let side = area.clamp(0.0, 1.0).sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    (y0, x0, ch, cw)
}

pub fn crop<T: Scalar>(image: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let s = image.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| image.at(n, c, y0 + y, x0 + x))
}

/// Random crop then optional horizontal flip, resized to `size×size`.
pub fn augment_image<T: Scalar, R: Rng>(image: &Tensor<T>, cfg: &AugmentConfig, size: usize, rng: &mut R) -> Tensor<T> {
    let s = image.shape();
    let area = if cfg.max_crop_area > cfg.min_crop_area {
        rng.gen_range(cfg.min_crop_area..=cfg.max_crop_area)
    } else {
        cfg.max_crop_area
    };
    let (y0, x0, ch, cw) = crop_window(s.h, s.w, area, rng);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let mut out = crop(image, y0, x0, ch, cw).resize_bilinear(size, size);
    if flip {
        out = out.flip_horizontal();
    }
    out
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { count: 64, size: 64, seed: 0 }
    }
}

/// One synthetic sample: an `1×3×S×S` image and its exact `1×1×S×S` mask.
pub fn synthetic_sample<T: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> (Tensor<T>, Tensor<T>) {
    let s = size as f64;
    // dim textured background
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.35));
    let (fx, fy) = (rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(-0.04..0.04)).collect();

    // one or two bright objects of one saturated colour
    let colour: [f64; 3] = {
        let mut c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
        c[rng.gen_range(0..3)] = rng.gen_range(0.85..1.0);
        c
    };
    let objects = if rng.gen_bool(0.3) { 2 } else { 1 };
    let mut shapes = Vec::new();
    for k in 0..objects {
        let r = if k == 0 { rng.gen_range(0.16..0.26) * s } else { rng.gen_range(0.11..0.16) * s };
        let aspect: f64 = rng.gen_range(0.7..1.4);
        let (ry, rx) = (r * aspect.sqrt(), r / aspect.sqrt());
        // the main object sits near the middle, as in photographs composed around a subject
        let (lo, hi) = if k == 0 { (0.35 * s, 0.65 * s) } else { (ry.max(rx) + 2.0, s - ry.max(rx) - 2.0) };
        let cy = rng.gen_range(lo..hi.max(lo + 1e-3));
        let cx = rng.gen_range(lo..hi.max(lo + 1e-3));
        shapes.push((cy, cx, ry, rx));
    }
    // small distractor specks in the object colour
    let specks: Vec<(f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| (rng.gen_range(2.0..s - 2.0), rng.gen_range(2.0..s - 2.0), rng.gen_range(0.8..1.6)))
        .collect();

    let inside = |y: f64, x: f64| shapes.iter().any(|&(cy, cx, ry, rx)| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0);
    let speck = |y: f64, x: f64| specks.iter().any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);

    let mask = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
        if inside(y as f64 + 0.5, x as f64 + 0.5) {
            T::one()
        } else {
            T::zero()
        }
    });
    let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let v = if inside(py, px) || speck(py, px) {
            colour[c] + noise[(c * size + y) * size + x] * 0.5
        } else {
            let texture = 0.06 * ((px * fx + phase).sin() * (py * fy).cos());
            base[c] + texture + noise[(c * size + y) * size + x]
        };
        lit(v.clamp(0.0, 1.0))
    });
    (image, mask)
}

/// Writes `count` images to `dir` and their masks to `dir/gt`.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<Dataset> {
    for i in 0..spec.count {
        let mut rng = sample_rng(spec.seed, u64::MAX, i as u64);
        let (image, mask) = synthetic_sample::<f64>(spec.size, &mut rng);
        let name = format!("blob_{i:04}.png");
        save_rgb(&dir.join(&name), &image)?;
        save_gray(&dir.join(GT_DIR).join(&name), mask.data(), spec.size, spec.size)?;
    }
    Dataset::open(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (h, w) = (rng.gen_range(1..80), rng.gen_range(1..80));
            let area = rng.gen_range(0.8..=1.0);
            let (y0, x0, ch, cw) = crop_window(h, w, area, &mut rng);
            assert!(y0 + ch <= h && x0 + cw <= w && ch >= 1 && cw >= 1);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let img = Tensor::<f32>::from_fn(Shape::new(1, 3, 40, 50), |_, c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 10.0);
        let cfg = AugmentConfig::default();
        let a = augment_image(&img, &cfg, 32, &mut sample_rng(9, 1, 4));
        let b = augment_image(&img, &cfg, 32, &mut sample_rng(9, 1, 4));
        assert_eq!(a.data(), b.data());
        let c = augment_image(&img, &cfg, 32, &mut sample_rng(9, 2, 4));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn identity_augmentation() {
        let img = Tensor::<f64>::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| (c + y + x) as f64 / 70.0);
        let cfg = AugmentConfig { flip_prob: 0.0, min_crop_area: 1.0, max_crop_area: 1.0 };
        let out = augment_image(&img, &cfg, 32, &mut sample_rng(0, 0, 0));
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(10, 1, 2);
        assert_ne!(o, (0..10).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_mask_matches_bright_object() {
        let (img, mask) = synthetic_sample::<f64>(64, &mut sample_rng(1, 0, 0));
        let fg = mask.sum();
        assert!(fg > 100.0 && fg < 64.0 * 64.0 / 2.0);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
