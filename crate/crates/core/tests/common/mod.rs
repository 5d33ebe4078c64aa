#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usod_core::autodiff::Var;
use usod_core::localizer::{sosl_from_map, ActivationHead};
use usod_core::nn::{Graph, Mode, ParamStore};
use usod_core::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Component areas of a 0/1 map via union-find, sorted in decreasing order.
pub fn union_find_areas(map: &[u8], h: usize, w: usize) -> Vec<usize> {
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if map[i] == 0 {
                continue;
            }
            // look back at the four already visited neighbours of an 8-neighbourhood
            for (dy, dx) in [(-1isize, -1isize), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if map[j] == 1 {
                    let (ra, rb) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 0..h * w {
        if map[i] == 1 {
            *counts.entry(find(&mut parent, i)).or_default() += 1;
        }
    }
    let mut areas: Vec<usize> = counts.into_values().collect();
    areas.sort_unstable_by(|a, b| b.cmp(a));
    areas
}

/// Size of the longest prefix of `areas` (decreasing) in which every
/// consecutive ratio is at most `theta_r`, never less than one.
pub fn brute_kept(areas: &[usize], theta_r: f64) -> usize {
    if areas.is_empty() {
        return 0;
    }
    (1..=areas.len())
        .rev()
        .find(|&k| (0..k - 1).all(|i| areas[i] as f64 <= theta_r * areas[i + 1] as f64))
        .unwrap_or(1)
}

/// Random soft label with `1..=8` separated rectangular objects above 0.6
/// and sub-threshold background. Returns the label and its object rectangles.
pub fn random_label(r: &mut ChaCha8Rng, side: usize) -> (Vec<f64>, Vec<(usize, usize, usize, usize)>) {
    let cells = 3;
    let cell = side / cells;
    let objects = r.gen_range(1..=8);
    let mut slots: Vec<usize> = (0..cells * cells).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, r.gen_range(0..=i));
    }
    let mut label: Vec<f64> = (0..side * side).map(|_| r.gen_range(0.0..0.59)).collect();
    let mut rects = Vec::new();
    for &slot in slots.iter().take(objects) {
        let (cy, cx) = (slot / cells * cell, slot % cells * cell);
        let hh = r.gen_range(1..cell - 1);
        let ww = r.gen_range(1..cell - 1);
        let (y0, x0) = (cy + 1, cx + 1);
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                label[y * side + x] = r.gen_range(0.6..=1.0);
            }
        }
        rects.push((y0, x0, hh, ww));
    }
    (label, rects)
}

pub fn plane_tensor(values: &[f64], h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 1, h, w), values.to_vec()).unwrap()
}

/// F-beta (beta² = 0.3) at the adaptive threshold, from an explicit
/// per-pixel confusion matrix.
pub fn brute_f_beta(pred: &[f64], gt: &[f64]) -> f64 {
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    let thr = (2.0 * mean).min(1.0);
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= thr, g >= 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    1.3 * precision * recall / (0.3 * precision + recall)
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)` for each coordinate.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .collect()
}

/// Fraction of coordinates under `1e-4` and the worst relative error.
pub fn gradient_agreement(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let errs = relative_errors(analytic, numeric);
    let good = errs.iter().filter(|&&e| e < 1e-4).count() as f64 / errs.len().max(1) as f64;
    (good, errs.iter().copied().fold(0.0, f64::max))
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// An activation head with random weights and random positive pyramid
/// levels: `F4` on an 8×8 grid and `F5` on 4×4.
pub struct SoslFixture {
    pub head: ActivationHead,
    pub store: ParamStore<f64>,
    pub f4: Tensor<f64>,
    pub f5: Tensor<f64>,
}

impl SoslFixture {
    pub fn new(seed: u64, batch: usize) -> Self {
        let mut r = rng(seed);
        let (c4, c5) = (6, 5);
        let head = ActivationHead::new(c4, c5);
        let mut store = ParamStore::new();
        head.register(&mut store, &mut r);
        let f4 = Tensor::from_fn(Shape::new(batch, c4, 8, 8), |_, _, _, _| r.gen_range(0.0..1.0));
        let f5 = Tensor::from_fn(Shape::new(batch, c5, 4, 4), |_, _, _, _| r.gen_range(0.0..1.0));
        Self { head, store, f4, f5 }
    }

    pub fn weight_name(&self) -> String {
        self.head.proj.weight_name()
    }

    /// Contrastive loss and its gradient with respect to the projection weights.
    pub fn loss_and_grad(&self, store: &ParamStore<f64>) -> (f64, Vec<f64>) {
        let mut g = Graph::new(store, Mode::Train { encoder_batch_stats: true }, true);
        let f4 = g.tape.constant(self.f4.clone());
        let f5 = g.tape.constant(self.f5.clone());
        let feats = self.head.features(&mut g, f4, f5).unwrap();
        let map = self.head.activation(&mut g, feats).unwrap();
        let (loss, _) = sosl_from_map(&mut g.tape, map, feats, 0.25).unwrap();
        let back = g.tape.backward(loss).unwrap();
        let name = self.weight_name();
        let var: Var = g.param_vars()[&name];
        let shape = store.get(&name).unwrap().value.shape();
        (g.tape.value(loss).item(), back.get_or_zeros(var, shape).into_vec())
    }

    pub fn loss_at(&self, weights: &[f64]) -> f64 {
        let mut store = self.store.clone();
        store.get_mut(&self.weight_name()).unwrap().value.data_mut().copy_from_slice(weights);
        self.loss_and_grad(&store).0
    }
}

/// Bright disc of radius 12 on a dark background, labelled 1 inside and with
/// a faint ring of label mass just outside it.
pub fn blob_with_halo() -> (Tensor<f64>, Tensor<f64>, Vec<bool>) {
    let mut r = rng(64);
    let inside = |y: usize, x: usize| (y as f64 - 31.5).powi(2) + (x as f64 - 31.5).powi(2) <= 144.0;
    let ring = |y: usize, x: usize| {
        let d = ((y as f64 - 31.5).powi(2) + (x as f64 - 31.5).powi(2)).sqrt();
        d > 12.0 && d <= 18.0
    };
    let image = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| {
        if inside(y, x) { 0.85 + 0.03 * c as f64 } else { 0.15 + r.gen_range(-0.03..0.03) }
    });
    let label = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, x| {
        if inside(y, x) { 1.0 } else if ring(y, x) { 0.45 + r.gen_range(0.0..0.1) } else { r.gen_range(0.0..0.05) }
    });
    let truth = (0..64 * 64).map(|i| inside(i / 64, i % 64)).collect();
    (image, label, truth)
}

pub fn halo_mass(label: &[f64], truth: &[bool]) -> f64 {
    label.iter().zip(truth).filter(|(_, &t)| !t).map(|(&v, _)| v).sum()
}
