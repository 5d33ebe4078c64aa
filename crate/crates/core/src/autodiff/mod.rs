//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse from a scalar root. Loss operations whose Jacobian is
//! cheap to form during the forward pass record it directly (`Op::Local`).

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{axis_taps, Shape, Tensor};

use kernels::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Affine { x: Var, scale: T },
    Concat(Vec<Var>),
    Resize(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Maximum { inputs: Vec<Var>, winner: Vec<u8> },
    WeightedPool { weights: Var, features: Var },
    Local { inputs: Vec<Var>, jacobians: Vec<Tensor<T>> },
    WeightedSum { inputs: Vec<Var>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a batch-norm in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that gradients flow into (a parameter or a probe input).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geom = ConvGeometry::new(xs, ws, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv input {xs} incompatible with weight {ws}")))?;
        if let Some(b) = b {
            if self.shape(b).len() != ws.n {
                return Err(Error::Shape(format!("conv bias {} for {} outputs", self.shape(b), ws.n)));
            }
        }
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalization over `N×H×W` per channel.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` estimates normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x);
        if self.shape(gamma).len() != s.c || self.shape(beta).len() != s.c {
            return Err(Error::Shape(format!("batch norm affine size vs {} channels", s.c)));
        }
        let xv = self.value(x);
        let plane = s.plane();
        let count = s.n * plane;
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        let stats = match running {
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                None
            }
            None => {
                let m = lit::<T>(count as f64);
                let mut unbiased = vec![T::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        acc += xv.plane(n, c).iter().copied().sum::<T>();
                    }
                    let mu = acc / m;
                    let mut sq = T::zero();
                    for n in 0..s.n {
                        sq += xv.plane(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[c] = mu;
                    var[c] = sq / m;
                    unbiased[c] = if count > 1 { sq / lit(count as f64 - 1.0) } else { sq };
                }
                Some(BatchStats { mean: mean.clone(), var: unbiased })
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c).to_vec();
                let xh = xhat.plane_mut(n, c);
                for (d, &v) in xh.iter_mut().zip(&src) {
                    *d = (v - mean[c]) * inv_std[c];
                }
                let xh = xhat.plane(n, c).to_vec();
                for (o, v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                    *o = gv[c] * v + bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg);
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `scale·x + shift` element-wise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return Err(Error::Shape(format!("concat {s} with {base}")));
            }
            channels += s.c;
        }
        let shape = base.with_channels(channels);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..base.n {
            for &p in parts {
                data.extend_from_slice(self.value(p).image(n));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if s.h == h && s.w == w {
            return x;
        }
        let out = self.value(x).resize_bilinear(h, w);
        let rg = self.rg(x);
        self.push(out, Op::Resize(x), rg)
    }

    /// Max pooling with square window.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let s = self.shape(x);
        let oh = (s.h + 2 * pad - kernel) / stride + 1;
        let ow = (s.w + 2 * pad - kernel) / stride + 1;
        let os = s.with_spatial(oh, ow);
        let xv = self.value(x);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0usize; os.len()];
        let mut k = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                let plane = xv.plane(n, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= s.h || ix as usize >= s.w {
                                    continue;
                                }
                                let i = iy as usize * s.w + ix as usize;
                                if plane[i] > best {
                                    best = plane[i];
                                    at = i;
                                }
                            }
                        }
                        out.data_mut()[k] = best;
                        argmax[k] = base + at;
                        k += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Element-wise maximum of equally shaped inputs (first wins ties).
    pub fn maximum(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Shape("maximum of nothing".into()))?;
        let shape = self.shape(first);
        for &v in inputs {
            if self.shape(v) != shape {
                return Err(Error::Shape(format!("maximum of {} and {shape}", self.shape(v))));
            }
        }
        let mut out = self.value(first).clone();
        let mut winner = vec![0u8; shape.len()];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                if x > out.data()[i] {
                    out.data_mut()[i] = x;
                    winner[i] = k as u8;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Maximum { inputs: inputs.to_vec(), winner }, rg))
    }

    /// `out[n, c] = Σ_p weights[n, 0, p] · features[n, c, p]`, shaped `N×C×1×1`.
    pub fn weighted_pool(&mut self, weights: Var, features: Var) -> Result<Var> {
        let (ws, fs) = (self.shape(weights), self.shape(features));
        if ws.c != 1 || ws.n != fs.n || ws.h != fs.h || ws.w != fs.w {
            return Err(Error::Shape(format!("weight map {ws} does not share the grid of features {fs}")));
        }
        let (wv, fv) = (self.value(weights), self.value(features));
        let out = Tensor::from_fn(Shape::new(fs.n, fs.c, 1, 1), |n, c, _, _| {
            wv.plane(n, 0).iter().zip(fv.plane(n, c)).map(|(&a, &b)| a * b).sum()
        });
        let rg = self.rg(weights) || self.rg(features);
        Ok(self.push(out, Op::WeightedPool { weights, features }, rg))
    }

    /// Records a scalar produced outside the tape together with its gradient
    /// with respect to each input.
    pub fn local(&mut self, value: T, inputs: &[Var], jacobians: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != jacobians.len() {
            return Err(Error::Shape("one jacobian per input required".into()));
        }
        for (&v, j) in inputs.iter().zip(&jacobians) {
            if self.shape(v) != j.shape() {
                return Err(Error::Shape(format!("jacobian {} for input {}", j.shape(), self.shape(v))));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::scalar(value), Op::Local { inputs: inputs.to_vec(), jacobians }, rg))
    }

    /// `Σ_k weights[k] · inputs[k]` over scalar nodes.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[T]) -> Result<Var> {
        if inputs.len() != weights.len() || inputs.is_empty() {
            return Err(Error::Shape("weighted sum needs one weight per input".into()));
        }
        let mut acc = T::zero();
        for (&v, &w) in inputs.iter().zip(weights) {
            if self.shape(v) != Shape::scalar() {
                return Err(Error::Shape("weighted sum over non-scalars".into()));
            }
            acc += w * self.value(v).item();
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec() }, rg))
    }

    /// Gradients of scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.shape(root) != Shape::scalar() {
            return Err(Error::Shape(format!("backward from non-scalar {}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, self.value(*x), self.value(*w), dy, self.rg(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    let bs = self.shape(*b);
                    acc(*b, db.reshape(bs).expect("bias shape"));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = dy.shape();
                let gv = self.value(*gamma).data();
                let m = lit::<T>((s.n * s.plane()) as f64);
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for (&g, &xh) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            dgamma[c] += g * xh;
                            dbeta[c] += g;
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = gv[c] * inv_std[c];
                            let out = dx.plane_mut(n, c);
                            for ((o, &g), &xh) in out.iter_mut().zip(dy.plane(n, c)).zip(xhat.plane(n, c)) {
                                *o = if *batch_stats {
                                    k * (g - dbeta[c] / m - xh * dgamma[c] / m)
                                } else {
                                    k * g
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                let gs = self.shape(*gamma);
                acc(*gamma, Tensor::from_vec(gs, dgamma).expect("gamma"));
                acc(*beta, Tensor::from_vec(gs, dbeta).expect("beta"));
            }
            Op::Relu(x) => {
                let g = self.value(*x).zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() });
                acc(*x, g.expect("relu"));
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(dy, |s, g| g * s * (T::one() - s));
                acc(*x, g.expect("sigmoid"));
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Affine { x, scale } => acc(*x, dy.map(|g| g * *scale)),
            Op::Concat(parts) => {
                let s = dy.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps.image_len();
                    let mut data = Vec::with_capacity(ps.len());
                    for n in 0..s.n {
                        let img = dy.image(n);
                        data.extend_from_slice(&img[offset..offset + len]);
                    }
                    offset += len;
                    acc(p, Tensor::from_vec(ps, data).expect("concat grad"));
                }
            }
            Op::Resize(x) => acc(*x, resize_adjoint(dy, self.shape(*x))),
            Op::MaxPool { x, argmax } => {
                let mut g = Tensor::zeros(self.shape(*x));
                for (&i, &d) in argmax.iter().zip(dy.data()) {
                    g.data_mut()[i] += d;
                }
                acc(*x, g);
            }
            Op::Maximum { inputs, winner } => {
                for (k, &v) in inputs.iter().enumerate() {
                    let mut g = Tensor::zeros(dy.shape());
                    for ((o, &d), &w) in g.data_mut().iter_mut().zip(dy.data()).zip(winner) {
                        if w as usize == k {
                            *o = d;
                        }
                    }
                    acc(v, g);
                }
            }
            Op::WeightedPool { weights, features } => {
                let (wv, fv) = (self.value(*weights), self.value(*features));
                let fs = fv.shape();
                if self.rg(*weights) {
                    let mut g = Tensor::zeros(wv.shape());
                    for n in 0..fs.n {
                        let out = g.plane_mut(n, 0);
                        for c in 0..fs.c {
                            let d = dy.at(n, c, 0, 0);
                            for (o, &f) in out.iter_mut().zip(fv.plane(n, c)) {
                                *o += d * f;
                            }
                        }
                    }
                    acc(*weights, g);
                }
                if self.rg(*features) {
                    let g = Tensor::from_fn(fs, |n, c, y, x| dy.at(n, c, 0, 0) * wv.at(n, 0, y, x));
                    acc(*features, g);
                }
            }
            Op::Local { inputs, jacobians } => {
                let d = dy.item();
                for (&v, j) in inputs.iter().zip(jacobians) {
                    acc(v, j.map(|x| x * d));
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let d = dy.item();
                for (&v, &w) in inputs.iter().zip(weights) {
                    acc(v, Tensor::scalar(w * d));
                }
            }
        }
    }
}

fn resize_adjoint<T: Scalar>(dy: &Tensor<T>, src: Shape) -> Tensor<T> {
    let ds = dy.shape();
    let ys = axis_taps::<T>(src.h, ds.h);
    let xs = axis_taps::<T>(src.w, ds.w);
    let mut g = Tensor::zeros(src);
    for n in 0..src.n {
        for c in 0..src.c {
            let d = dy.plane(n, c);
            let out = g.plane_mut(n, c);
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let v = d[oy * ds.w + ox];
                    let (wy0, wy1) = (T::one() - ty.frac, ty.frac);
                    let (wx0, wx1) = (T::one() - tx.frac, tx.frac);
                    out[ty.i0 * src.w + tx.i0] += v * wy0 * wx0;
                    out[ty.i0 * src.w + tx.i1] += v * wy0 * wx1;
                    out[ty.i1 * src.w + tx.i0] += v * wy1 * wx0;
                    out[ty.i1 * src.w + tx.i1] += v * wy1 * wx1;
                }
            }
        }
    }
    g
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x0`, one coordinate at a time.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.data().len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn pseudo(shape: Shape, salt: usize) -> Tensor<f64> {
        let mut k = salt as u64 * 2654435761 + 1;
        Tensor::from_fn(shape, |_, _, _, _| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((k >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    /// Sum of `probe ⊙ out` turns any tensor into a scalar with a dense gradient.
    fn project(t: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Var {
        let value: f64 = t.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        t.local(value, &[out], vec![probe.clone()]).unwrap()
    }

    #[test]
    fn conv_bn_relu_chain_gradients() {
        let x0 = pseudo(Shape::new(2, 3, 6, 5), 1);
        let w0 = pseudo(Shape::new(4, 3, 3, 3), 2);
        let probe = pseudo(Shape::new(2, 4, 3, 3), 3);
        let run = |x: &Tensor<f64>, w: &Tensor<f64>| -> (f64, Option<(Tensor<f64>, Tensor<f64>)>) {
            let mut t = Tape::new();
            let xv = t.variable(x.clone());
            let wv = t.variable(w.clone());
            let gamma = t.variable(Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 0.5, 2.0, 1.5]).unwrap());
            let beta = t.variable(Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![0.1, -0.2, 0.0, 0.3]).unwrap());
            let c = t.conv2d(xv, wv, None, 2, 1).unwrap();
            let (b, _) = t.batch_norm(c, gamma, beta, None, 1e-5).unwrap();
            let s = t.sigmoid(b);
            let l = project(&mut t, s, &probe);
            let g = t.backward(l).unwrap();
            (t.value(l).item(), Some((g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())))
        };
        let (_, grads) = run(&x0, &w0);
        let (gx, gw) = grads.unwrap();
        assert_close(gx.data(), &numeric_grad(&x0, |x| run(x, &w0).0), 1e-5);
        assert_close(gw.data(), &numeric_grad(&w0, |w| run(&x0, w).0), 1e-5);
    }

    #[test]
    fn resize_pool_concat_maximum_gradients() {
        let x0 = pseudo(Shape::new(1, 2, 5, 6), 4);
        let probe = pseudo(Shape::new(1, 4, 4, 4), 5);
        let wmap = pseudo(Shape::new(1, 1, 4, 4), 6);
        let run = |x: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut t = Tape::new();
            let xv = t.variable(x.clone());
            let up = t.resize_bilinear(xv, 8, 8);
            let pooled = t.max_pool(up, 3, 2, 1);
            let down = t.resize_bilinear(xv, 4, 4);
            let neg = t.affine(down, -1.0, 0.2);
            let m = t.maximum(&[pooled, neg]).unwrap();
            let cat = t.concat_channels(&[m, down]).unwrap();
            let w = t.constant(wmap.clone());
            let pool = t.weighted_pool(w, cat).unwrap();
            let pv: f64 = t.value(cat).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let l1 = t.local(pv, &[cat], vec![probe.clone()]).unwrap();
            let l2v: f64 = t.value(pool).data().iter().sum();
            let l2 = t.local(l2v, &[pool], vec![Tensor::ones(t.shape(pool))]).unwrap();
            let l = t.weighted_sum(&[l1, l2], &[1.0, 0.7]).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).item(), g.get(xv).unwrap().clone())
        };
        let (_, gx) = run(&x0);
        assert_close(gx.data(), &numeric_grad(&x0, |x| run(x).0), 1e-5);
    }

    #[test]
    fn eval_mode_batch_norm_is_affine() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let g = t.constant(Tensor::scalar(2.0));
        let b = t.constant(Tensor::scalar(0.5));
        let (y, stats) = t.batch_norm(x, g, b, Some((&[1.0], &[4.0])), 0.0).unwrap();
        assert!(stats.is_none());
        assert_eq!(t.value(y).data(), &[0.5, 2.5]);
    }
}
