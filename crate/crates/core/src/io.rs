//! PNG/JPEG loading and 8-bit map export.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// `1×3×H×W` colour image scaled to `[0, 1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = lit::<T>(1.0 / 255.0);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        lit::<T>(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
    }))
}

/// `1×1×H×W` grey map scaled to `[0, 1]`.
pub fn load_gray<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        lit::<T>(img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    }))
}

/// Binary mask: pixels at or above half intensity are foreground.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(load_gray::<T>(path)?.map(|v| if v >= lit(0.5) { T::one() } else { T::zero() }))
}

pub fn to_u8<T: Scalar>(v: T) -> u8 {
    let f = v.to_f64().unwrap_or(0.0);
    (f.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one `h×w` plane as an 8-bit PNG.
pub fn save_gray<T: Scalar>(path: &Path, plane: &[T], height: usize, width: usize) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::Shape(format!("{} values for a {height}×{width} image", plane.len())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut img = GrayImage::new(width as u32, height as u32);
    for (i, &v) in plane.iter().enumerate() {
        img.put_pixel((i % width) as u32, (i / width) as u32, Luma([to_u8(v)]));
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a `1×3×H×W` tensor as an 8-bit RGB PNG.
pub fn save_rgb<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Shape(format!("save_rgb expects 1×3×H×W, got {s}")));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut img = image::RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = [0, 1, 2].map(|c| to_u8(image.at(0, c, y, x)));
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
