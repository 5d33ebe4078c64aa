//! Saliency scores: adaptive F-measure, MAE and the enhanced-alignment measure.
//!
//! All per-image scores take an `h×w` prediction plane in `[0, 1]` and a
//! binary ground-truth plane of the same size. Dataset evaluation resizes
//! predictions to the ground-truth resolution before scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{list_images, load_gray, load_mask, stem};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const BETA_SQ: f64 = 0.3;

fn check_len<T>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Twice the mean prediction, capped at 1.
pub fn adaptive_threshold<T: Scalar>(pred: &[T]) -> T {
    let mean = pred.iter().copied().sum::<T>() / lit::<T>(pred.len() as f64);
    (mean + mean).min(T::one())
}

pub fn binarize_adaptive<T: Scalar>(pred: &[T]) -> Vec<bool> {
    let thr = adaptive_threshold(pred);
    pred.iter().map(|&v| v >= thr).collect()
}

fn is_fg<T: Scalar>(v: T) -> bool {
    v >= lit(0.5)
}

/// Precision-recall F-measure at the adaptive threshold.
pub fn f_beta<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    check_len(pred, gt)?;
    let bin = binarize_adaptive(pred);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in bin.iter().zip(gt) {
        match (p, is_fg(g)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(T::zero());
    }
    let precision = lit::<T>(tp as f64 / (tp + fp) as f64);
    let recall = lit::<T>(tp as f64 / (tp + fn_) as f64);
    let b2 = lit::<T>(BETA_SQ);
    let denom = b2 * precision + recall;
    if denom <= T::zero() {
        return Ok(T::zero());
    }
    Ok((T::one() + b2) * precision * recall / denom)
}

pub fn mae<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    check_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| (p - g).abs()).sum::<T>() / lit::<T>(pred.len() as f64))
}

/// Enhanced-alignment measure of the adaptively binarized prediction.
///
/// With an empty ground truth the score is the fraction of predicted
/// background, with a full one the fraction of predicted foreground.
/// Otherwise both maps are mean-centred, aligned per pixel as
/// `2ab / (a² + b²)`, mapped through `(1 + ξ)² / 4` and averaged.
pub fn e_measure<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    check_len(pred, gt)?;
    let n = lit::<T>(pred.len() as f64);
    let fm: Vec<T> = binarize_adaptive(pred).into_iter().map(|b| if b { T::one() } else { T::zero() }).collect();
    let g: Vec<T> = gt.iter().map(|&v| if is_fg(v) { T::one() } else { T::zero() }).collect();
    let fg = g.iter().copied().sum::<T>();
    if fg == T::zero() {
        return Ok(fm.iter().map(|&v| T::one() - v).sum::<T>() / n);
    }
    if fg == n {
        return Ok(fm.iter().copied().sum::<T>() / n);
    }
    let mu_fm = fm.iter().copied().sum::<T>() / n;
    let mu_gt = fg / n;
    let quarter = lit::<T>(0.25);
    let total: T = fm
        .iter()
        .zip(&g)
        .map(|(&p, &t)| {
            let (a, b) = (p - mu_fm, t - mu_gt);
            let denom = a * a + b * b;
            let align = if denom > T::zero() { (a * b + a * b) / denom } else { T::zero() };
            (T::one() + align) * (T::one() + align) * quarter
        })
        .sum();
    Ok(total / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f_beta: f64,
    pub e_measure: f64,
    pub mae: f64,
}

/// All three scores for one `h×w` pair.
pub fn score_plane<T: Scalar>(pred: &[T], gt: &[T]) -> Result<Scores> {
    Ok(Scores {
        f_beta: f_beta(pred, gt)?.to_f64().unwrap_or(f64::NAN),
        e_measure: e_measure(pred, gt)?.to_f64().unwrap_or(f64::NAN),
        mae: mae(pred, gt)?.to_f64().unwrap_or(f64::NAN),
    })
}

/// Mean scores over an `N×1×H×W` batch; the prediction is resized to the
/// ground-truth grid first.
pub fn score_batch<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Scores> {
    let (ps, gs) = (pred.shape(), gt.shape());
    if ps.n != gs.n || ps.c != 1 || gs.c != 1 || ps.n == 0 {
        return Err(Error::Shape(format!("cannot score {ps} against {gs}")));
    }
    let pred = pred.resize_bilinear(gs.h, gs.w);
    let scores = (0..gs.n).map(|n| score_plane(pred.plane(n, 0), gt.plane(n, 0))).collect::<Result<Vec<_>>>()?;
    Ok(mean_scores(&scores))
}

pub fn mean_scores(scores: &[Scores]) -> Scores {
    let k = scores.len().max(1) as f64;
    Scores {
        f_beta: scores.iter().map(|s| s.f_beta).sum::<f64>() / k,
        e_measure: scores.iter().map(|s| s.e_measure).sum::<f64>() / k,
        mae: scores.iter().map(|s| s.mae).sum::<f64>() / k,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub images: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<DatasetRow>,
    /// Unmatched or unreadable files.
    pub errors: Vec<String>,
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\timages\tf_beta\te_measure\tmae\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                r.dataset, r.images, r.scores.f_beta, r.scores.e_measure, r.scores.mae
            ));
        }
        out
    }

    /// Writes `eval.tsv` and `eval.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join("eval.tsv");
        fs::write(&tsv, self.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join("eval.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (stem(&p), p)).collect())
}

/// Scores one flat directory of predictions against one of masks.
pub fn evaluate_pair(name: &str, pred_dir: &Path, gt_dir: &Path, errors: &mut Vec<String>) -> Result<Option<DatasetRow>> {
    let preds = by_stem(pred_dir)?;
    let gts = by_stem(gt_dir)?;
    for k in preds.keys().filter(|k| !gts.contains_key(*k)) {
        errors.push(format!("{name}: prediction `{k}` has no ground truth"));
    }
    for k in gts.keys().filter(|k| !preds.contains_key(*k)) {
        errors.push(format!("{name}: ground truth `{k}` has no prediction"));
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        preds.iter().filter_map(|(k, p)| gts.get(k).map(|g| (k, p, g))).collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let results: Vec<(String, Result<Scores>)> = pairs
        .par_iter()
        .map(|(k, p, g)| {
            let r = (|| {
                let pred = load_gray::<f64>(p)?;
                let gt = load_mask::<f64>(g)?;
                score_batch(&pred, &gt)
            })();
            ((*k).clone(), r)
        })
        .collect();
    let mut scores = Vec::new();
    for (k, r) in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => errors.push(format!("{name}: `{k}`: {e}")),
        }
    }
    if scores.is_empty() {
        return Ok(None);
    }
    Ok(Some(DatasetRow { dataset: name.to_string(), images: scores.len(), scores: mean_scores(&scores) }))
}

/// Scores `pred_dir` against `gt_dir`.
///
/// Sub-directories present on both sides are scored as separate datasets;
/// otherwise both directories are treated as one flat dataset.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let pred_sets = subdirs(pred_dir)?;
    let gt_names: Vec<String> = subdirs(gt_dir)?.iter().map(|p| stem_dir(p)).collect();
    let nested: Vec<&PathBuf> = pred_sets.iter().filter(|p| gt_names.contains(&stem_dir(p))).collect();
    if nested.is_empty() {
        let name = stem_dir(pred_dir);
        if let Some(row) = evaluate_pair(&name, pred_dir, gt_dir, &mut report.errors)? {
            report.rows.push(row);
        }
    } else {
        for p in nested {
            let name = stem_dir(p);
            if let Some(row) = evaluate_pair(&name, p, &gt_dir.join(&name), &mut report.errors)? {
                report.rows.push(row);
            }
        }
    }
    if report.rows.is_empty() {
        return Err(Error::Dataset(format!(
            "no prediction in {} matches a ground truth in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    Ok(report)
}

fn stem_dir(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}
