mod common;

use common::{brute_kept, plane_tensor, random_label, rng, union_find_areas};
use proptest::prelude::*;
use rand::Rng;
use usod_core::types::{connected_components, threshold_plane};
use usod_core::unss::{kept_prefix, unss, UnssParams};

const SIDE: usize = 24;

/// Binary map of the pixels that survive suppression.
fn surviving(label: &[f64], theta_r: f64) -> Vec<u8> {
    let out = unss(&plane_tensor(label, SIDE, SIDE), 0.6, &UnssParams::new(theta_r)).unwrap();
    threshold_plane(out.data(), 0.6)
}

#[test]
fn flood_fill_matches_union_find() {
    let mut r = rng(11);
    for _ in 0..300 {
        let (h, w) = (r.gen_range(1..20), r.gen_range(1..20));
        let density = r.gen_range(0.1..0.7);
        let map: Vec<u8> = (0..h * w).map(|_| u8::from(r.gen_bool(density))).collect();
        assert_eq!(connected_components(&map, h, w).unwrap().areas(), union_find_areas(&map, h, w));
    }
}

#[test]
fn suppression_matches_prefix_oracle() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let (label, rects) = random_label(&mut r, SIDE);
        let theta_r = [2.0, 2.5, 3.0][r.gen_range(0..3)];
        let areas = union_find_areas(&threshold_plane(&label, 0.6), SIDE, SIDE);
        assert_eq!(areas.len(), rects.len());
        let keep = brute_kept(&areas, theta_r);
        assert_eq!(kept_prefix(&areas, &UnssParams::new(theta_r)), keep);

        let out = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(theta_r)).unwrap();
        let kept_areas = union_find_areas(&threshold_plane(out.data(), 0.6), SIDE, SIDE);
        assert_eq!(kept_areas, areas[..keep].to_vec());
        // sub-threshold values and kept objects are untouched
        for (a, b) in label.iter().zip(out.data()) {
            assert!(*b == *a || *b == 0.0);
        }
    }
}

#[test]
fn infinite_ratio_is_identity() {
    let mut r = rng(8);
    for _ in 0..200 {
        let (label, _) = random_label(&mut r, SIDE);
        let out = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(f64::INFINITY)).unwrap();
        assert_eq!(out.data(), &label[..]);
    }
}

#[test]
fn literal_rule_never_keeps_more() {
    let mut r = rng(21);
    for _ in 0..500 {
        let n = r.gen_range(1..8);
        let mut areas: Vec<usize> = (0..n).map(|_| r.gen_range(1..500)).collect();
        areas.sort_unstable_by(|a, b| b.cmp(a));
        let literal = UnssParams { theta_r: 2.5, literal: true };
        assert!(kept_prefix(&areas, &literal) <= kept_prefix(&areas, &UnssParams::new(2.5)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kept_sets_grow_with_ratio(seed in any::<u64>()) {
        let (label, _) = random_label(&mut rng(seed), SIDE);
        let sets: Vec<Vec<u8>> = [2.0, 2.5, 3.0, f64::INFINITY].iter().map(|&t| surviving(&label, t)).collect();
        for pair in sets.windows(2) {
            prop_assert!(pair[0].iter().zip(&pair[1]).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn suppression_only_zeroes(seed in any::<u64>(), theta_r in 1.0f64..6.0) {
        let (label, _) = random_label(&mut rng(seed), SIDE);
        let out = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(theta_r)).unwrap();
        prop_assert!(out.data().iter().zip(&label).all(|(o, l)| o <= l));
        // the largest object always survives
        let before = union_find_areas(&threshold_plane(&label, 0.6), SIDE, SIDE);
        let after = union_find_areas(&threshold_plane(out.data(), 0.6), SIDE, SIDE);
        prop_assert_eq!(after.first(), before.first());
    }

    #[test]
    fn suppression_is_idempotent(seed in any::<u64>()) {
        let (label, _) = random_label(&mut rng(seed), SIDE);
        let p = UnssParams::new(2.5);
        let once = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &p).unwrap();
        let twice = unss(&once, 0.6, &p).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }
}
