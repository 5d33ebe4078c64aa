//! Suppression of disproportionately small objects in detailed labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{connected_components, threshold_plane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnssParams {
    /// Area ratio threshold; `f64::INFINITY` disables suppression.
    pub theta_r: f64,
    /// Follow the printed loop exactly, which may drop even the largest object.
    #[serde(default)]
    pub literal: bool,
}

impl Default for UnssParams {
    fn default() -> Self {
        Self { theta_r: 2.5, literal: false }
    }
}

impl UnssParams {
    pub fn new(theta_r: f64) -> Self {
        Self { theta_r, literal: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_r > 0.0) {
            return Err(Error::Config(format!("θ_r must be positive, got {}", self.theta_r)));
        }
        Ok(())
    }

    pub fn disabled(&self) -> bool {
        self.theta_r.is_infinite()
    }
}

/// Number of leading entries of the decreasing `areas` list that survive.
pub fn kept_prefix(areas: &[usize], params: &UnssParams) -> usize {
    if areas.is_empty() {
        return 0;
    }
    if params.disabled() {
        return areas.len();
    }
    let passes = |i: usize| areas[i] as f64 <= areas[i + 1] as f64 * params.theta_r;
    if params.literal {
        // Object i is kept only once the ratio test towards i+1 passes; the last one is kept when reached.
        let mut kept = 0;
        for i in 0..areas.len() {
            if i + 1 == areas.len() || passes(i) {
                kept = i + 1;
            } else {
                break;
            }
        }
        return kept;
    }
    let mut kept = 1;
    while kept < areas.len() && passes(kept - 1) {
        kept += 1;
    }
    kept
}

/// Applies suppression to one `h×w` plane, returning the number of kept components.
pub fn unss_plane<T: Scalar>(plane: &mut [T], height: usize, width: usize, theta_f: T, params: &UnssParams) -> Result<usize> {
    let binary = threshold_plane(plane, theta_f);
    let set = connected_components(&binary, height, width)?;
    let kept = kept_prefix(&set.areas(), params);
    for comp in &set.components[kept..] {
        for &p in &comp.pixels {
            plane[p] = T::zero();
        }
    }
    Ok(kept)
}

/// Suppression for a single-image `1×1×H×W` label.
pub fn unss<T: Scalar>(label: &Tensor<T>, theta_f: T, params: &UnssParams) -> Result<Tensor<T>> {
    if label.shape().n != 1 {
        return Err(Error::Shape(format!("unss expects one label, got {}", label.shape())));
    }
    unss_batch(label, theta_f, params)
}

/// Independent suppression for every image of an `N×1×H×W` batch.
pub fn unss_batch<T: Scalar>(labels: &Tensor<T>, theta_f: T, params: &UnssParams) -> Result<Tensor<T>> {
    params.validate()?;
    let s = labels.shape();
    if s.c != 1 {
        return Err(Error::Shape(format!("labels must have one channel, got {s}")));
    }
    let mut out = labels.clone();
    if params.disabled() || s.n == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(s.h * s.w)
        .try_for_each(|plane| unss_plane(plane, s.h, s.w, theta_f, params).map(|_| ()))?;
    Ok(out)
}
