use std::path::Path;

use crate::error::Result;
use crate::io::save_gray;
use crate::scalar::Scalar;

use super::data::Dataset;
use super::model::Model;

pub const LOCATION_DIR: &str = "location";
pub const DETAILED_DIR: &str = "detailed";
pub const UNSS_DIR: &str = "unss";

/// Writes `location/`, `detailed/` and `unss/` PNGs for every dataset image,
/// each resized back to the image's own resolution. Returns the image count.
pub fn export_pseudo_labels<T: Scalar>(model: &Model<T>, dataset: &Dataset, out_dir: &Path) -> Result<usize> {
    let size = model.config.image_size;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(model.config.batch_size) {
        let originals = chunk.iter().map(|&i| dataset.load::<T>(i)).collect::<Result<Vec<_>>>()?;
        let resized: Vec<_> = originals.iter().map(|img| img.resize_bilinear(size, size)).collect();
        let labels = model.pseudo_labels(&crate::tensor::Tensor::stack(&resized)?, true)?;
        for (k, &i) in chunk.iter().enumerate() {
            let s = originals[k].shape();
            let file = format!("{}.png", dataset.name(i));
            for (dir, t) in [(LOCATION_DIR, &labels.location), (DETAILED_DIR, &labels.detailed), (UNSS_DIR, &labels.suppressed)] {
                let plane = t.select(k).resize_bilinear(s.h, s.w);
                save_gray(&out_dir.join(dir).join(&file), plane.data(), s.h, s.w)?;
            }
        }
    }
    Ok(dataset.len())
}
