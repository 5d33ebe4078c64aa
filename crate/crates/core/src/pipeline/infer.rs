use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{list_images, load_rgb, save_gray, stem};
use crate::scalar::Scalar;

use super::checkpoint::load_checkpoint;
use super::model::Model;

/// Saliency maps for every image in `in_dir`, written to `out_dir/<stem>.png`
/// at the input's resolution.
pub fn infer_dir<T: Scalar>(model: &Model<T>, in_dir: &Path, out_dir: &Path) -> Result<usize> {
    let inputs = list_images(in_dir)?;
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", in_dir.display())));
    }
    let size = model.config.image_size;
    for path in &inputs {
        let image = load_rgb::<T>(path)?;
        let s = image.shape();
        let pred = model.predict(&image.resize_bilinear(size, size))?.resize_bilinear(s.h, s.w);
        save_gray(&out_dir.join(format!("{}.png", stem(path))), pred.data(), s.h, s.w)?;
    }
    Ok(inputs.len())
}

pub fn infer<T: Scalar>(checkpoint: &Path, in_dir: &Path, out_dir: &Path) -> Result<usize> {
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    infer_dir(&ckpt.model, in_dir, out_dir)
}
