//! Shared domain types, certainty binarization and connected components.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MIN_IMAGE_SIDE: usize = 32;

/// `N×3×H×W` colour images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    data: Tensor<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.n == 0 || s.c != 3 {
            return Err(Error::Contract(format!("image batch must be N×3×H×W with N ≥ 1, got {s}")));
        }
        if s.h < MIN_IMAGE_SIDE || s.w < MIN_IMAGE_SIDE {
            return Err(Error::Contract(format!("image side below {MIN_IMAGE_SIDE}: {s}")));
        }
        if data.data().iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
            return Err(Error::Contract("image values must be finite and within [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn shape(&self) -> Shape {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Location,
    Detailed,
    Prediction,
}

/// `N×1×H×W` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyLabel<T> {
    pub data: Tensor<T>,
    pub kind: LabelKind,
}

impl<T: Scalar> SaliencyLabel<T> {
    pub fn new(data: Tensor<T>, kind: LabelKind) -> Result<Self> {
        if data.shape().c != 1 {
            return Err(Error::Contract(format!("label must have one channel, got {}", data.shape())));
        }
        if data.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Contract("label values must lie in [0, 1]".into()));
        }
        Ok(Self { data, kind })
    }

    pub fn shape(&self) -> Shape {
        self.data.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Certainty {
    Background,
    Foreground,
    Ignore,
}

/// Ternary per-pixel supervision derived from a soft label.
#[derive(Clone, Debug, PartialEq)]
pub struct CertaintyMask {
    pub shape: Shape,
    pub states: Vec<Certainty>,
}

impl CertaintyMask {
    pub fn certain_count(&self) -> usize {
        self.states.iter().filter(|s| **s != Certainty::Ignore).count()
    }

    pub fn count(&self, state: Certainty) -> usize {
        self.states.iter().filter(|s| **s == state).count()
    }

    /// Foreground as 1, background as 0, ignore as `None`.
    pub fn target<T: Scalar>(&self, i: usize) -> Option<T> {
        match self.states[i] {
            Certainty::Foreground => Some(T::one()),
            Certainty::Background => Some(T::zero()),
            Certainty::Ignore => None,
        }
    }
}

pub fn check_thresholds<T: Scalar>(theta_f: T, theta_g: T) -> Result<()> {
    if !(theta_g >= T::zero() && theta_g < theta_f && theta_f <= T::one()) {
        return Err(Error::Config(format!(
            "thresholds need 0 ≤ θ_g < θ_f ≤ 1, got θ_f={theta_f}, θ_g={theta_g}"
        )));
    }
    Ok(())
}

/// Pixels `≥ θ_f` become foreground, `≤ θ_g` background, the rest ignore.
pub fn binarize_certain<T: Scalar>(label: &Tensor<T>, theta_f: T, theta_g: T) -> Result<CertaintyMask> {
    check_thresholds(theta_f, theta_g)?;
    let states = label
        .data()
        .iter()
        .map(|&v| {
            if v >= theta_f {
                Certainty::Foreground
            } else if v <= theta_g {
                Certainty::Background
            } else {
                Certainty::Ignore
            }
        })
        .collect();
    Ok(CertaintyMask { shape: label.shape(), states })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Flat `y·W + x` indices in scan order.
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// First pixel in raster order.
    pub fn anchor(&self) -> usize {
        self.pixels[0]
    }
}

/// Disjoint components sorted by decreasing area, ties in scan order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ComponentSet {
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn areas(&self) -> Vec<usize> {
        self.components.iter().map(Component::area).collect()
    }
}

/// 8-connected components of a strictly binary `height×width` map.
pub fn connected_components(map: &[u8], height: usize, width: usize) -> Result<ComponentSet> {
    if map.len() != height * width {
        return Err(Error::Shape(format!("map of {} pixels for {height}×{width}", map.len())));
    }
    if let Some(v) = map.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("connected_components needs a 0/1 map, found {v}")));
    }
    let mut label = vec![usize::MAX; map.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..map.len() {
        if map[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        label[start] = id;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if map[q] == 1 && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(Component { pixels });
    }
    // stable: equal areas keep discovery (scan) order
    components.sort_by(|a, b| b.area().cmp(&a.area()));
    Ok(ComponentSet { components })
}

/// Binary map of `plane ≥ threshold`.
pub fn threshold_plane<T: Scalar>(plane: &[T], threshold: T) -> Vec<u8> {
    plane.iter().map(|&v| u8::from(v >= threshold)).collect()
}
