mod common;

use common::{blob_with_halo, halo_mass, rng};
use proptest::prelude::*;
use rand::Rng;
use usod_core::refiner::{
    refine, refine_iterations, refine_plane, AffinityKernel, AffinityKernelParams, AffinityScales, Appearance,
};
use usod_core::{Shape, Tensor};

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| r.gen_range(0.0..1.0))
}

fn params(iterations: usize, renormalize: bool) -> AffinityKernelParams {
    AffinityKernelParams { iterations, renormalize, ..Default::default() }
}

#[test]
fn halo_mass_shrinks() {
    let (image, label, truth) = blob_with_halo();
    let out = refine(&label, &image, &AffinityKernelParams::default(), 0.6).unwrap();
    let (before, after) = (halo_mass(label.data(), &truth), halo_mass(out.data(), &truth));
    assert!(after < before, "halo mass {before} -> {after}");
}

#[test]
fn single_iteration_is_one_step() {
    let image = random_image(1, 9, 7);
    let label = Tensor::from_fn(Shape::new(1, 1, 9, 7), |_, _, y, x| ((y * 7 + x) % 5) as f64 / 5.0);
    let p = params(1, false);
    let kernel = AffinityKernel::build(&Appearance::from_image(&image, 0), &p);
    let direct = refine_iterations(label.data(), &kernel, 1);
    let via = refine(&label, &image, &p, 0.6).unwrap();
    assert_eq!(via.data(), &direct[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_are_stochastic(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let image = random_image(seed, h, w);
        let k = AffinityKernel::build(&Appearance::from_image(&image, 0), &AffinityKernelParams::default());
        for row in &k.weights {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            if h * w > 1 {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_stays_zero(seed in any::<u64>(), t in 1usize..8) {
        let image = random_image(seed, 10, 10);
        let out = refine(&Tensor::zeros(Shape::new(1, 1, 10, 10)), &image, &params(t, true), 0.6).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_stays_in_unit_range(seed in any::<u64>(), t in 1usize..6) {
        let image = random_image(seed, 12, 12);
        let mut r = rng(seed ^ 1);
        let label = Tensor::from_fn(Shape::new(1, 1, 12, 12), |_, _, _, _| r.gen_range(0.0..=1.0));
        let out = refine(&label, &image, &params(t, true), 0.6).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn far_label_changes_do_not_reach(seed in any::<u64>(), t in prop::sample::select(vec![1usize, 3]),
                                      py in 0usize..16, px in 0usize..16, qy in 0usize..16, qx in 0usize..16) {
        prop_assume!(py.abs_diff(qy).max(px.abs_diff(qx)) > t);
        let image = random_image(seed, 16, 16);
        let mut r = rng(seed ^ 2);
        let label = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, _, _| r.gen_range(0.0..=1.0));
        let mut changed = label.clone();
        changed.set(0, 0, qy, qx, 1.0 - label.at(0, 0, qy, qx));
        let p = params(t, false);
        let app = Appearance::from_image(&image, 0);
        let a = refine_plane(label.data(), &app, &p, 0.6);
        let b = refine_plane(changed.data(), &app, &p, 0.6);
        prop_assert_eq!(a[py * 16 + px], b[py * 16 + px]);
    }

    #[test]
    fn far_image_changes_do_not_reach(seed in any::<u64>(), t in prop::sample::select(vec![1usize, 3]),
                                      py in 0usize..16, px in 0usize..16, qy in 0usize..16, qx in 0usize..16) {
        // with the kernel scales held fixed, an appearance change at q alters
        // only the weights of q and its direct neighbours
        prop_assume!(py.abs_diff(qy).max(px.abs_diff(qx)) > t);
        let image = random_image(seed, 16, 16);
        let mut changed = image.clone();
        for c in 0..3 {
            changed.set(0, c, qy, qx, 1.0 - image.at(0, c, qy, qx));
        }
        let mut r = rng(seed ^ 3);
        let label: Vec<f64> = (0..256).map(|_| r.gen_range(0.0..=1.0)).collect();
        let scales = AffinityScales { sigma_appearance: 0.3, sigma_position: 0.2 };
        let p = params(t, false);
        let ka = AffinityKernel::build_with(&Appearance::from_image(&image, 0), &scales, &p);
        let kb = AffinityKernel::build_with(&Appearance::from_image(&changed, 0), &scales, &p);
        let a = refine_iterations(&label, &ka, t);
        let b = refine_iterations(&label, &kb, t);
        prop_assert_eq!(a[py * 16 + px], b[py * 16 + px]);
    }
}
