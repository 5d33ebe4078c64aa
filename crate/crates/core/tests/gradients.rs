mod common;

use common::{gradient_agreement, numeric_gradient, rng, SoslFixture};
use rand::Rng;
use usod_core::losses::{iou_loss, lsc_loss, partial_bce, LscParams};
use usod_core::types::binarize_certain;
use usod_core::{Shape, Tensor};

const STEP: f64 = 1e-6;

fn random_map(seed: u64, n: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(n, 1, 8, 8), |_, _, _, _| r.gen_range(0.05..0.95))
}

/// Colours within a narrow band, so that the appearance gate of every
/// neighbour pair is far from underflow.
fn random_image(seed: u64, n: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(n, 3, 8, 8), |_, _, _, _| 0.4 + r.gen_range(0.0..0.15))
}

fn with(shape: Shape, values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, values.to_vec()).unwrap()
}

fn assert_agrees(name: &str, analytic: &[f64], numeric: &[f64]) {
    let (good, worst) = gradient_agreement(analytic, numeric);
    assert!(good >= 0.99 && worst < 1e-2, "{name}: {good:.4} of coordinates within 1e-4, worst {worst:.2e}");
}

#[test]
fn partial_bce_gradient() {
    for seed in 0..3 {
        let m = random_map(seed, 2);
        let label = random_map(seed + 100, 2);
        let mask = binarize_certain(&label, 0.6, 0.1).unwrap();
        let shape = m.shape();
        let analytic = partial_bce(&m, &mask).unwrap().grad.into_vec();
        let numeric = numeric_gradient(m.data(), STEP, |x| partial_bce(&with(shape, x), &mask).unwrap().value);
        assert_agrees("pbce", &analytic, &numeric);
    }
}

#[test]
fn lsc_gradient() {
    let params = LscParams::default();
    for seed in 0..3 {
        let m = random_map(seed, 2);
        let img = random_image(seed + 7, 2);
        let shape = m.shape();
        let analytic = lsc_loss(&m, &img, &params).unwrap().grad.into_vec();
        let numeric = numeric_gradient(m.data(), STEP, |x| lsc_loss(&with(shape, x), &img, &params).unwrap().value);
        assert_agrees("lsc", &analytic, &numeric);
    }
}

#[test]
fn iou_gradient() {
    for seed in 0..3 {
        let m = random_map(seed, 2);
        let target = random_map(seed + 50, 2);
        let shape = m.shape();
        let analytic = iou_loss(&m, &target).unwrap().grad.into_vec();
        let numeric = numeric_gradient(m.data(), STEP, |x| iou_loss(&with(shape, x), &target).unwrap().value);
        assert_agrees("iou", &analytic, &numeric);
    }
}

#[test]
fn contrastive_gradient_wrt_head_weights() {
    for seed in 0..2 {
        let fx = SoslFixture::new(seed, 3);
        let (_, analytic) = fx.loss_and_grad(&fx.store);
        let w = fx.store.get(&fx.weight_name()).unwrap().value.data().to_vec();
        let numeric = numeric_gradient(&w, STEP, |x| fx.loss_at(x));
        assert_agrees("sosl", &analytic, &numeric);
    }
}

#[test]
fn lsc_vanishes_on_constant_prediction() {
    let m = Tensor::full(Shape::new(1, 1, 8, 8), 0.3);
    let v = lsc_loss(&m, &random_image(3, 1), &LscParams::default()).unwrap();
    assert_eq!(v.value, 0.0);
}
