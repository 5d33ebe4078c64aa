//! Acceptance run: one line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    blob_with_halo, brute_f_beta, brute_kept, gradient_agreement, halo_mass, numeric_gradient, plane_tensor,
    random_label, rng, union_find_areas, SoslFixture,
};
use rand::Rng;
use usod_core::localizer::{negative_loss, positive_loss, similarity_sets, sosl_loss, split_samples};
use usod_core::losses::{iou_loss, lsc_loss, partial_bce, total_loss, LossComponents, LossWeights, LscParams};
use usod_core::metrics::{f_beta, score_plane};
use usod_core::nn::ParamGroup;
use usod_core::pipeline::train::METRICS_FILE;
use usod_core::pipeline::{
    evaluate_model, label_quality, train, write_synthetic_dataset, Dataset, LabelQuality, Model, SyntheticSpec,
    TrainConfig, TrainOptions,
};
use usod_core::refiner::{
    refine, refine_iterations, refine_plane, AffinityKernel, AffinityKernelParams, AffinityScales, Appearance,
};
use usod_core::types::threshold_plane;
use usod_core::unss::{kept_prefix, unss, UnssParams};
use usod_core::{Shape, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SIDE: usize = 24;

fn unss_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1001);
    for case in 0..1000 {
        let (label, _) = random_label(&mut r, SIDE);
        let theta_r = [2.0, 2.5, 3.0][case % 3];
        let areas = union_find_areas(&threshold_plane(&label, 0.6), SIDE, SIDE);
        let keep = brute_kept(&areas, theta_r);
        ensure!(kept_prefix(&areas, &UnssParams::new(theta_r)) == keep, "case {case}: prefix length differs");
        let out = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(theta_r)).map_err(|e| e.to_string())?;
        let kept = union_find_areas(&threshold_plane(out.data(), 0.6), SIDE, SIDE);
        ensure!(kept == areas[..keep], "case {case}: kept areas {kept:?}, oracle {:?}", &areas[..keep]);
        let same = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(f64::INFINITY)).map_err(|e| e.to_string())?;
        ensure!(same.data() == &label[..], "case {case}: infinite ratio changed the label");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:.1?}");
    Ok(format!("1000 cases in {took:.2?}"))
}

fn unss_monotone() -> Outcome {
    let mut r = rng(2002);
    for case in 0..1000 {
        let (label, _) = random_label(&mut r, SIDE);
        let sets: Vec<Vec<u8>> = [2.0, 2.5, 3.0]
            .iter()
            .map(|&t| {
                let out = unss(&plane_tensor(&label, SIDE, SIDE), 0.6, &UnssParams::new(t)).unwrap();
                threshold_plane(out.data(), 0.6)
            })
            .collect();
        for pair in sets.windows(2) {
            ensure!(pair[0].iter().zip(&pair[1]).all(|(a, b)| a <= b), "case {case}: kept set shrank");
        }
    }
    Ok("1000 cases, 2 ⊆ 2.5 ⊆ 3".into())
}

fn with(shape: Shape, values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, values.to_vec()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let step = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut worst_by_loss: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, a: Vec<f64>, n: Vec<f64>| {
        let w = worst_by_loss.entry(name).or_default();
        *w = w.max(gradient_agreement(&a, &n).1);
        analytic.extend(a);
        numeric.extend(n);
    };
    for seed in 0..3u64 {
        let mut r = rng(seed);
        let shape = Shape::new(2, 1, 8, 8);
        let m = Tensor::from_fn(shape, |_, _, _, _| r.gen_range(0.05..0.95));
        let label = Tensor::from_fn(shape, |_, _, _, _| r.gen_range(0.0..1.0));
        let mask = usod_core::types::binarize_certain(&label, 0.6, 0.1).unwrap();
        let target = Tensor::from_fn(shape, |_, _, _, _| r.gen_range(0.05..0.95));
        let img = Tensor::from_fn(Shape::new(2, 3, 8, 8), |_, _, _, _| 0.4 + r.gen_range(0.0..0.15));
        let lsc = LscParams::default();

        let a = partial_bce(&m, &mask).unwrap().grad.into_vec();
        let n = numeric_gradient(m.data(), step, |x| partial_bce(&with(shape, x), &mask).unwrap().value);
        record("pbce", a, n);
        let a = lsc_loss(&m, &img, &lsc).unwrap().grad.into_vec();
        let n = numeric_gradient(m.data(), step, |x| lsc_loss(&with(shape, x), &img, &lsc).unwrap().value);
        record("lsc", a, n);
        let a = iou_loss(&m, &target).unwrap().grad.into_vec();
        let n = numeric_gradient(m.data(), step, |x| iou_loss(&with(shape, x), &target).unwrap().value);
        record("iou", a, n);

        let fx = SoslFixture::new(seed, 3);
        let (_, a) = fx.loss_and_grad(&fx.store);
        let w = fx.store.get(&fx.weight_name()).unwrap().value.data().to_vec();
        let n = numeric_gradient(&w, step, |x| fx.loss_at(x));
        record("sosl", a, n);
    }
    let (good, worst) = gradient_agreement(&analytic, &numeric);
    let took = start.elapsed();
    let detail = format!(
        "{:.2}% of {} coordinates within 1e-4, worst {worst:.1e} [{}], {took:.1?}",
        good * 100.0,
        analytic.len(),
        worst_by_loss.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")
    );
    ensure!(good >= 0.99 && worst < 1e-2 && took < Duration::from_secs(60), "{detail}");
    Ok(detail)
}

fn contrastive_cases() -> Outcome {
    let map = Tensor::from_fn(Shape::new(4, 1, 4, 4), |_, _, y, x| if (1..3).contains(&y) && (1..3).contains(&x) { 0.9 } else { 0.2 });
    let feats = Tensor::from_fn(Shape::new(4, 5, 4, 4), |_, c, y, x| ((c * 3 + y * 5 + x * 7) % 11) as f64 / 10.0 + 0.05);
    let t = sosl_loss(&similarity_sets(&split_samples(&map, &feats).unwrap()), 0.25).unwrap();
    ensure!(t.pos_fg.abs() < 1e-6 && t.pos_bg.abs() < 1e-6, "identical batch: {t:?}");

    let map = Tensor::from_fn(Shape::new(3, 1, 4, 4), |_, _, y, _| if y < 2 { 1.0 } else { 0.0 });
    let feats = Tensor::from_fn(Shape::new(3, 2, 4, 4), |_, c, y, x| match (c, y < 2) {
        (0, true) => 0.5 + x as f64,
        (1, false) => 1.0 + y as f64,
        _ => 0.0,
    });
    let o = sosl_loss(&similarity_sets(&split_samples(&map, &feats).unwrap()), 0.25).unwrap();
    ensure!(o.neg.abs() < 1e-6, "orthogonal descriptors: {o:?}");

    let neg: f64 = negative_loss(&[0.0, 0.5]).unwrap();
    let pos: f64 = positive_loss(&[1.0, 0.5], 0.25).unwrap();
    ensure!((neg - 0.346_573_590_279_972_6).abs() < 1e-6, "two-entry negative {neg}");
    ensure!((pos - 0.269_911_783_501_910_9).abs() < 1e-6, "two-entry positive {pos}");
    Ok(format!("pos {:.1e}/{:.1e}, neg {:.1e}, hand {neg:.6}/{pos:.6}", t.pos_fg, t.pos_bg, o.neg))
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| r.gen_range(0.0..1.0))
}

fn refiner_properties() -> Outcome {
    let mut worst_row = 0.0f64;
    for seed in 0..50 {
        let image = random_image(seed, 1 + seed as usize % 11, 2 + seed as usize % 7);
        let k = AffinityKernel::build(&Appearance::from_image(&image, 0), &AffinityKernelParams::default());
        for row in &k.weights {
            ensure!(row.iter().all(|&v| v >= 0.0), "negative affinity");
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst_row <= 1e-6, "row sum off by {worst_row:.1e}");

    for seed in 0..20 {
        let p = AffinityKernelParams { iterations: 1 + seed as usize % 7, ..Default::default() };
        let out = refine(&Tensor::zeros(Shape::new(1, 1, 10, 10)), &random_image(seed, 10, 10), &p, 0.6).unwrap();
        ensure!(out.data().iter().all(|&v| v == 0.0), "zero label moved");
    }

    let (image, label, truth) = blob_with_halo();
    let out = refine(&label, &image, &AffinityKernelParams::default(), 0.6).unwrap();
    let (before, after) = (halo_mass(label.data(), &truth), halo_mass(out.data(), &truth));
    ensure!(after < before, "halo mass {before:.2} -> {after:.2}");

    let n = 12;
    let mut checked = 0usize;
    for t in [1usize, 3] {
        let p = AffinityKernelParams { iterations: t, renormalize: false, ..Default::default() };
        let image = random_image(40 + t as u64, n, n);
        let mut r = rng(t as u64);
        let label: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let app = Appearance::from_image(&image, 0);
        let base = refine_plane(&label, &app, &p, 0.6);
        let scales = AffinityScales { sigma_appearance: 0.3, sigma_position: 0.2 };
        let kernel = AffinityKernel::build_with(&app, &scales, &p);
        let fixed_base = refine_iterations(&label, &kernel, t);
        for q in 0..n * n {
            let mut flipped = label.clone();
            flipped[q] = 1.0 - flipped[q];
            let moved = refine_plane(&flipped, &app, &p, 0.6);
            let mut recoloured = image.clone();
            for c in 0..3 {
                recoloured.set(0, c, q / n, q % n, 1.0 - image.at(0, c, q / n, q % n));
            }
            let k2 = AffinityKernel::build_with(&Appearance::from_image(&recoloured, 0), &scales, &p);
            let moved_image = refine_iterations(&label, &k2, t);
            for pix in 0..n * n {
                let dist = (pix / n).abs_diff(q / n).max((pix % n).abs_diff(q % n));
                if dist > t {
                    ensure!(moved[pix] == base[pix], "T={t}: label change at {q} reached {pix}");
                    ensure!(moved_image[pix] == fixed_base[pix], "T={t}: image change at {q} reached {pix}");
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("row error {worst_row:.1e}, halo {before:.1} -> {after:.1}, {checked} far pairs unchanged"))
}

fn metric_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(seed);
        let fg = r.gen_range(0.05..0.6);
        let gt: Vec<f64> = (0..256).map(|_| if r.gen_bool(fg) { 1.0 } else { 0.0 }).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| (g * r.gen_range(0.3..1.0) + r.gen_range(0.0..0.5)).min(1.0)).collect();
        worst = worst.max((f_beta(&pred, &gt).unwrap() - brute_f_beta(&pred, &gt)).abs());

        let s = score_plane(&gt, &gt).unwrap();
        ensure!((s.f_beta, s.e_measure, s.mae) == (1.0, 1.0, 0.0), "case {seed}: pred = gt gave {s:?}");
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let s = score_plane(&inv, &gt).unwrap();
        ensure!(s.f_beta == 0.0 && s.e_measure < 0.25 && s.mae == 1.0, "case {seed}: inverted gave {s:?}");
    }
    ensure!(worst <= 1e-9, "f_beta off by {worst:.1e}");
    Ok(format!("100 cases, f_beta max error {worst:.1e}"))
}

fn tiny_config(root: &Path) -> TrainConfig {
    let data = root.join("data");
    write_synthetic_dataset(&data, &SyntheticSpec { count: 8, size: 40, seed: 3 }).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.image_size = 32;
    cfg.batch_size = 4;
    cfg.data.train_dir = data;
    cfg.output_dir = root.join("run");
    cfg
}

fn warmup_schedule() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let model = Model::<f64>::initialized(cfg.clone()).unwrap();
    let batch = Dataset::open(&cfg.data.train_dir).unwrap().resized_batch(&[0, 1, 2, 3], cfg.image_size).unwrap();
    let out = model.step_gradients(&batch, 0).unwrap();
    let mut decoder_tensors = 0;
    for (name, g) in &out.grads {
        if model.store.get(name).unwrap().group == ParamGroup::Decoder {
            ensure!(g.data().iter().all(|&v| v == 0.0), "{name} has a warm-up gradient");
            decoder_tensors += 1;
        }
    }
    ensure!(decoder_tensors > 0, "no decoder parameters seen");
    ensure!(out.total == out.components.sosl, "warm-up total {} vs sosl {}", out.total, out.components.sosl);

    let ones = LossComponents { sosl: 1.0, pbce: 1.0, lsc: 1.0, iou: 1.0 };
    let main = cfg.schedule.weights_at(1);
    ensure!(main == LossWeights::MAIN, "epoch 2 weights {main:?}");
    let total = total_loss(&ones, &main).unwrap();
    ensure!((total - 2.2f64).abs() < 1e-12, "unit total {total}");
    Ok(format!("{decoder_tensors} decoder tensors with zero gradient, unit total {total}"))
}

/// Least-squares slope of `ys` against their index.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, &y)| {
        let dx = i as f64 - mx;
        (a + dx * (y - my), b + dx * dx)
    });
    num / den
}

struct SmokeRun {
    quality: LabelQuality,
    detail: String,
}

fn end_to_end(root: &Path) -> Result<SmokeRun, String> {
    let data = root.join("data");
    let dataset = write_synthetic_dataset(&data, &SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::smoke();
    cfg.data.train_dir = data;
    cfg.output_dir = root.join("a");

    let before = evaluate_model(&Model::<f32>::new(cfg.clone()).unwrap(), &dataset).unwrap();
    let start = Instant::now();
    let run = train::<f32>(&cfg, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let after = evaluate_model(&run.model, &dataset).unwrap();

    let totals: Vec<f64> = run.log.iter().map(|r| r.total).collect();
    let steps = totals.len();
    ensure!((50..=200).contains(&steps), "{steps} steps");
    ensure!(run.log.iter().all(|r| [r.sosl, r.pbce, r.lsc, r.iou, r.total].iter().all(|v| v.is_finite())), "non-finite loss");
    let steepest = totals.windows(50).map(slope).fold(f64::NEG_INFINITY, f64::max);
    ensure!(steepest <= 0.0, "a 50-step window rises with slope {steepest:.2e}");
    let gain = after.f_beta - before.f_beta;
    ensure!(gain >= 0.2, "F_beta {:.3} -> {:.3}", before.f_beta, after.f_beta);

    let mut again = cfg.clone();
    again.output_dir = root.join("b");
    let start = Instant::now();
    train::<f32>(&again, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let took_again = start.elapsed();
    let la = fs::read(cfg.output_dir.join(METRICS_FILE)).unwrap();
    let lb = fs::read(again.output_dir.join(METRICS_FILE)).unwrap();
    ensure!(la == lb, "metrics logs differ between identical runs");
    ensure!(took.max(took_again) < Duration::from_secs(600), "run took {:.1?}", took.max(took_again));

    let quality = label_quality(&run.model, &dataset).unwrap();
    Ok(SmokeRun {
        quality,
        detail: format!(
            "{steps} steps in {took:.0?}, F_beta {:.3} -> {:.3}, steepest window slope {steepest:.1e}, logs identical",
            before.f_beta, after.f_beta
        ),
    })
}

fn label_ordering(q: &LabelQuality) -> Outcome {
    let (l, d, u) = (q.location.f_beta, q.detailed.f_beta, q.unss.f_beta);
    let detail = format!("location {l:.3}, detailed {d:.3}, unss {u:.3}");
    ensure!(d >= l && u >= d, "{detail}");
    Ok(detail)
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(usize, &str, Outcome)> = vec![
        (1, "unss oracle", guarded(unss_oracle)),
        (2, "unss monotonicity", guarded(unss_monotone)),
        (3, "loss gradients", guarded(gradients)),
        (4, "contrastive cases", guarded(contrastive_cases)),
        (5, "refiner properties", guarded(refiner_properties)),
        (6, "metric oracles", guarded(metric_oracles)),
        (7, "warm-up schedule", guarded(warmup_schedule)),
    ];
    let dir = tempfile::tempdir().unwrap();
    let smoke = catch_unwind(AssertUnwindSafe(|| end_to_end(dir.path())))
        .unwrap_or_else(|_| Err("panicked".into()));
    match smoke {
        Ok(run) => {
            outcomes.push((8, "end-to-end smoke", Ok(run.detail)));
            outcomes.push((9, "label ordering", guarded(|| label_ordering(&run.quality))));
        }
        Err(e) => {
            outcomes.push((8, "end-to-end smoke", Err(e)));
            outcomes.push((9, "label ordering", Err("no trained model".into())));
        }
    }

    let mut failed = 0;
    for (id, name, outcome) in &outcomes {
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL  {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
