//! Dense four-dimensional tensors in `N×C×H×W` layout.
//!
//! Every value in the pipeline (images, feature maps, labels, descriptors,
//! scalar losses) is a [`Tensor`]; lower-rank quantities keep trailing unit
//! dimensions (`N×d×1×1` for descriptors, `1×1×1×1` for scalars).

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Self {
        Self { h, w, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Value of a `1×1×1×1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Contiguous slice of image `n` (all channels).
    pub fn image(&self, n: usize) -> &[T] {
        let len = self.shape.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous slice of plane `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Copies image `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Self {
        Self { shape: Shape { n: 1, ..self.shape }, data: self.image(n).to_vec() }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.image_len() * parts.len());
        let mut n = 0;
        for p in parts {
            if p.shape.c != base.c || p.shape.h != base.h || p.shape.w != base.w {
                return Err(Error::Shape(format!("cannot stack {} with {}", p.shape, base)));
            }
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Self { shape: Shape { n, ..base }, data })
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("shape mismatch {} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / lit::<T>(self.data.len() as f64)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. `f64` golden data into an `f32` tensor.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from(v).expect("castable")).collect(),
        }
    }

    /// Horizontally mirrored copy.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        Self::from_fn(s, |n, c, y, x| self.at(n, c, y, s.w - 1 - x))
    }

    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        let s = self.shape;
        if s.h == h && s.w == w {
            return self.clone();
        }
        let ys = axis_taps::<T>(s.h, h);
        let xs = axis_taps::<T>(s.w, w);
        let mut out = Tensor::zeros(s.with_spatial(h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let top = src[ty.i0 * s.w + tx.i0] * (T::one() - tx.frac)
                            + src[ty.i0 * s.w + tx.i1] * tx.frac;
                        let bot = src[ty.i1 * s.w + tx.i0] * (T::one() - tx.frac)
                            + src[ty.i1 * s.w + tx.i1] * tx.frac;
                        dst[oy * w + ox] = top * (T::one() - ty.frac) + bot * ty.frac;
                    }
                }
            }
        }
        out
    }
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

pub(crate) fn axis_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap { i0, i1, frac: lit(frac) }
        })
        .collect()
}
