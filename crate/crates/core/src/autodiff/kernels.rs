//! Dense numeric kernels shared by the tape operations.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `k×m`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `b` stored as `n×k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Option<Self> {
        if weight.h != weight.w || weight.c != input.c || stride == 0 {
            return None;
        }
        let k = weight.h;
        if input.h + 2 * pad < k || input.w + 2 * pad < k {
            return None;
        }
        Some(Self {
            in_c: input.c,
            out_c: weight.n,
            kernel: k,
            stride,
            pad,
            in_h: input.h,
            in_w: input.w,
            out_h: (input.h + 2 * pad - k) / stride + 1,
            out_w: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, img: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], img: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let n = x.shape().n;
    let out_shape = Shape::new(n, g.out_c, g.out_h, g.out_w);
    let plane = g.out_plane();
    let rows = g.col_rows();
    let images: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![T::zero(); g.out_c * plane];
            if let Some(b) = b {
                for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.data()[oc];
                    chunk.iter_mut().for_each(|v| *v = bv);
                }
            }
            if g.is_pointwise() {
                gemm_nn(g.out_c, rows, plane, w.data(), x.image(i), &mut out);
            } else {
                let mut col = vec![T::zero(); rows * plane];
                im2col(g, x.image(i), &mut col);
                gemm_nn(g.out_c, rows, plane, w.data(), &col, &mut out);
            }
            out
        })
        .collect();
    Tensor::from_vec(out_shape, images.concat()).expect("conv output shape")
}

/// Returns `(dx, dw, db)`; the caller discards what it does not need.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n = x.shape().n;
    let plane = g.out_plane();
    let rows = g.col_rows();
    let parts: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dout = dy.image(i);
            let mut dw = vec![T::zero(); g.out_c * rows];
            let db: Vec<T> = dout.chunks(plane).map(|c| c.iter().copied().sum()).collect();
            let dx = if g.is_pointwise() {
                gemm_nt(g.out_c, plane, rows, dout, x.image(i), &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); rows * plane];
                    gemm_tn(rows, g.out_c, plane, w.data(), dout, &mut dx);
                    dx
                })
            } else {
                let mut col = vec![T::zero(); rows * plane];
                im2col(g, x.image(i), &mut col);
                gemm_nt(g.out_c, plane, rows, dout, &col, &mut dw);
                need_dx.then(|| {
                    col.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(rows, g.out_c, plane, w.data(), dout, &mut col);
                    let mut dx = vec![T::zero(); g.in_c * g.in_h * g.in_w];
                    col2im(g, &col, &mut dx);
                    dx
                })
            };
            (dx, dw, db)
        })
        .collect();

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(Shape::new(1, g.out_c, 1, 1));
    let mut dx_all = need_dx.then(|| Vec::with_capacity(x.shape().len()));
    for (dx, dwi, dbi) in parts {
        for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
            *a += b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(dbi) {
            *a += b;
        }
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    let dx = dx_all.map(|d| Tensor::from_vec(x.shape(), d).expect("dx shape"));
    (dx, dw, db)
}
