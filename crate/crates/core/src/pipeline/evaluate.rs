use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_mask, IMAGE_EXTENSIONS};
use crate::metrics::{mean_scores, score_batch, Scores};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::data::Dataset;
use super::model::Model;

/// Mask of image `index` in the dataset's `gt/` directory, matched by stem.
pub fn gt_path(dataset: &Dataset, index: usize) -> Result<PathBuf> {
    let name = dataset.name(index);
    let dir = dataset.gt_dir();
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Dataset(format!("no mask for `{name}` in {}", dir.display())))
}

/// Runs `f` on consecutive model-sized batches and hands each output back
/// together with the original image index.
fn for_batches<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    mut f: impl FnMut(&Tensor<T>, &[usize]) -> Result<()>,
) -> Result<()> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(model.config.batch_size) {
        let images = dataset.resized_batch::<T>(chunk, model.config.image_size)?;
        f(&images, chunk)?;
    }
    Ok(())
}

/// Mean decoder scores over a dataset that carries masks.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Scores> {
    let mut scores = Vec::with_capacity(dataset.len());
    for_batches(model, dataset, |images, chunk| {
        let pred = model.predict(images)?;
        for (k, &i) in chunk.iter().enumerate() {
            let gt = load_mask::<T>(&gt_path(dataset, i)?)?;
            scores.push(score_batch(&pred.select(k), &gt)?);
        }
        Ok(())
    })?;
    Ok(mean_scores(&scores))
}

/// Mean scores of the three pseudo-labels against the dataset masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub location: Scores,
    pub detailed: Scores,
    pub unss: Scores,
}

pub fn label_quality<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<LabelQuality> {
    let (mut loc, mut det, mut sup) = (Vec::new(), Vec::new(), Vec::new());
    for_batches(model, dataset, |images, chunk| {
        let labels = model.pseudo_labels(images, true)?;
        for (k, &i) in chunk.iter().enumerate() {
            let gt = load_mask::<T>(&gt_path(dataset, i)?)?;
            loc.push(score_batch(&labels.location.select(k), &gt)?);
            det.push(score_batch(&labels.detailed.select(k), &gt)?);
            sup.push(score_batch(&labels.suppressed.select(k), &gt)?);
        }
        Ok(())
    })?;
    Ok(LabelQuality { location: mean_scores(&loc), detailed: mean_scores(&det), unss: mean_scores(&sup) })
}
