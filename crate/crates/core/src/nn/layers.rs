//! Layer kernels with explicit reverse-mode derivatives.
//!
//! Forward passes in training mode return a [`Cache`] holding whatever the
//! backward pass needs; the layer definitions themselves are immutable so
//! one network can be traced several times before any backward pass.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{Grads, ParamSet};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    /// Per-sample, per-channel normalisation without affine parameters.
    InstanceNorm,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    /// Nearest-neighbour 2x upsampling.
    Upsample2x,
    /// `x + f(x)`.
    Residual(Vec<Layer>),
}

pub enum Cache<T> {
    Conv { cols: Vec<T>, in_shape: [usize; 4] },
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    /// Layer output, enough for monotone activations.
    Activation(Vec<T>),
    Upsample { in_shape: [usize; 4] },
    Residual(Vec<Cache<T>>),
}

#[inline]
fn source_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n - 1);
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - m;
            }
            Some(m as usize)
        }
    }
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// For each kernel offset and output coordinate, the source coordinate.
    fn index_table(&self, n_in: usize, n_out: usize) -> Vec<Option<usize>> {
        let mut t = Vec::with_capacity(self.kernel * n_out);
        for k in 0..self.kernel {
            for o in 0..n_out {
                let i = (o * self.stride + k) as isize - self.pad as isize;
                t.push(source_index(i, n_in, self.padding));
            }
        }
        t
    }

    /// Output range `[lo, hi)` along one axis whose source index for kernel
    /// offset `k` lies inside the input without padding.
    fn interior(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let inside = |o: usize| (0..n_in as isize).contains(&(o as isize * s + off));
        let lo = (0..n_out).find(|&o| inside(o)).unwrap_or(n_out);
        let hi = (lo..n_out).find(|&o| !inside(o)).unwrap_or(n_out);
        (lo, hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let ys = self.index_table(h, oh);
        let xs = self.index_table(w, ow);
        let spans: Vec<(usize, usize)> = (0..k).map(|kx| self.interior(kx, w, ow)).collect();
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = spans[kx];
                    let edge = |ox: usize, src: &[T]| xs[kx * ow + ox].map_or(T::zero(), |ix| src[ix]);
                    for oy in 0..oh {
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        let Some(iy) = ys[ky * oh + oy] else {
                            out.fill(T::zero());
                            continue;
                        };
                        let src = &plane[iy * w..(iy + 1) * w];
                        for ox in (0..lo).chain(hi..ow) {
                            out[ox] = edge(ox, src);
                        }
                        if lo < hi {
                            let start = lo * s + kx - self.pad;
                            if s == 1 {
                                out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (v, ix) in out[lo..hi].iter_mut().zip((start..).step_by(s)) {
                                    *v = src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let ys = self.index_table(h, oh);
        let xs = self.index_table(w, ow);
        let spans: Vec<(usize, usize)> = (0..k).map(|kx| self.interior(kx, w, ow)).collect();
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = spans[kx];
                    for oy in 0..oh {
                        let Some(iy) = ys[ky * oh + oy] else { continue };
                        let line = &src[oy * ow..(oy + 1) * ow];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for ox in (0..lo).chain(hi..ow) {
                            if let Some(ix) = xs[kx * ow + ox] {
                                dst[ix] += line[ox];
                            }
                        }
                        if lo < hi {
                            let start = lo * s + kx - self.pad;
                            for (v, ix) in line[lo..hi].iter().zip((start..).step_by(s)) {
                                dst[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>, train: bool) -> (Tensor<T>, Option<Cache<T>>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w).expect("conv input too small");
        let ckk = c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let weight = params.values(self.weight);
        let bias = params.values(self.bias);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut all_cols = if train { vec![T::zero(); n * ckk * ohw] } else { Vec::new() };
        let mut scratch = if train { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        for i in 0..n {
            let cols: &mut [T] = if train { &mut all_cols[i * ckk * ohw..(i + 1) * ckk * ohw] } else { &mut scratch };
            self.im2col(x.sample(i), h, w, oh, ow, cols);
            let y = out.sample_mut(i);
            for (o, b) in bias.iter().enumerate() {
                y[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = *b);
            }
            T::gemm(false, false, self.out_channels, ckk, ohw, T::one(), weight, cols, T::one(), y);
        }
        let cache = train.then_some(Cache::Conv { cols: all_cols, in_shape: [n, c, h, w] });
        (out, cache)
    }

    fn param_grads<T: Scalar>(&self, cols: &[T], in_shape: [usize; 4], dy: &Tensor<T>, g: &mut Grads<T>) {
        let [n, c, _, _] = in_shape;
        let ckk = c * self.kernel * self.kernel;
        let ohw = dy.height() * dy.width();
        let oc = self.out_channels;
        let (gw, gb) = g.pair_mut(self.weight, self.bias);
        for i in 0..n {
            let dyi = dy.sample(i);
            T::gemm(false, true, oc, ohw, ckk, T::one(), dyi, &cols[i * ckk * ohw..(i + 1) * ckk * ohw], T::one(), gw);
            for (o, b) in gb.iter_mut().enumerate() {
                *b += dyi[o * ohw..(o + 1) * ohw].iter().fold(T::zero(), |a, v| a + *v);
            }
        }
    }

    fn input_grad<T: Scalar>(&self, params: &ParamSet<T>, in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = in_shape;
        let (oh, ow) = (dy.height(), dy.width());
        let ckk = c * self.kernel * self.kernel;
        let weight = params.values(self.weight);
        let mut dx = Tensor::zeros(in_shape);
        let mut dcols = vec![T::zero(); ckk * oh * ow];
        for i in 0..n {
            T::gemm(true, false, ckk, self.out_channels, oh * ow, T::one(), weight, dy.sample(i), T::zero(), &mut dcols);
            self.col2im(&dcols, h, w, oh, ow, dx.sample_mut(i));
        }
        dx
    }
}

fn instance_norm_forward<T: Scalar>(x: Tensor<T>, train: bool) -> (Tensor<T>, Option<Cache<T>>) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let inv_n = T::one() / T::c(plane as f64);
    let eps = T::c(NORM_EPS);
    let mut out = x;
    let mut inv_stds = Vec::with_capacity(if train { n * c } else { 0 });
    for p in out.as_mut_slice().chunks_exact_mut(plane) {
        let mean = p.iter().fold(T::zero(), |a, v| a + *v) * inv_n;
        let var = p.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        p.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        if train {
            inv_stds.push(inv_std);
        }
    }
    let cache = train.then(|| Cache::Norm { xhat: out.as_slice().to_vec(), inv_std: inv_stds });
    (out, cache)
}

fn instance_norm_backward<T: Scalar>(xhat: &[T], inv_std: &[T], dy: Tensor<T>) -> Tensor<T> {
    let plane = dy.height() * dy.width();
    let inv_n = T::one() / T::c(plane as f64);
    let mut dx = dy;
    for ((g, xh), s) in dx.as_mut_slice().chunks_exact_mut(plane).zip(xhat.chunks_exact(plane)).zip(inv_std) {
        let mean_g = g.iter().fold(T::zero(), |a, v| a + *v) * inv_n;
        let mean_gx = g.iter().zip(xh).fold(T::zero(), |a, (v, x)| a + *v * *x) * inv_n;
        for (v, x) in g.iter_mut().zip(xh) {
            *v = *s * (*v - mean_g - *x * mean_gx);
        }
    }
    dx
}

fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.as_slice().chunks_exact(h * w).zip(out.as_mut_slice().chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    for (src, dst) in dy.as_slice().chunks_exact(oh * ow).zip(dx.as_mut_slice().chunks_exact_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

impl Layer {
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: Tensor<T>, train: bool) -> (Tensor<T>, Option<Cache<T>>) {
        match self {
            Layer::Conv(conv) => conv.forward(params, &x, train),
            Layer::InstanceNorm => instance_norm_forward(x, train),
            Layer::Relu => {
                let mut y = x;
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
                let cache = train.then(|| Cache::Activation(y.as_slice().to_vec()));
                (y, cache)
            }
            Layer::LeakyRelu(slope) => {
                let s = T::c(*slope);
                let mut y = x;
                y.as_mut_slice().iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v *= s
                    }
                });
                let cache = train.then(|| Cache::Activation(y.as_slice().to_vec()));
                (y, cache)
            }
            Layer::Sigmoid => {
                let mut y = x;
                y.as_mut_slice().iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
                let cache = train.then(|| Cache::Activation(y.as_slice().to_vec()));
                (y, cache)
            }
            Layer::Upsample2x => {
                let y = upsample_forward(&x);
                (y, train.then(|| Cache::Upsample { in_shape: x.shape() }))
            }
            Layer::Residual(inner) => {
                let mut caches = Vec::new();
                let mut h = x.clone();
                for l in inner {
                    let (next, c) = l.forward(params, h, train);
                    h = next;
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                h.add_assign(&x).expect("residual branch keeps shape");
                (h, train.then_some(Cache::Residual(caches)))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: Cache<T>,
        dy: Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                if let Some(g) = grads {
                    conv.param_grads(&cols, in_shape, &dy, g);
                }
                conv.input_grad(params, in_shape, &dy)
            }
            (Layer::InstanceNorm, Cache::Norm { xhat, inv_std }) => instance_norm_backward(&xhat, &inv_std, dy),
            (Layer::Relu, Cache::Activation(y)) => {
                let mut g = dy;
                g.as_mut_slice().iter_mut().zip(&y).for_each(|(d, y)| {
                    if *y <= T::zero() {
                        *d = T::zero()
                    }
                });
                g
            }
            (Layer::LeakyRelu(slope), Cache::Activation(y)) => {
                let s = T::c(*slope);
                let mut g = dy;
                g.as_mut_slice().iter_mut().zip(&y).for_each(|(d, y)| {
                    if *y < T::zero() {
                        *d *= s
                    }
                });
                g
            }
            (Layer::Sigmoid, Cache::Activation(y)) => {
                let mut g = dy;
                g.as_mut_slice().iter_mut().zip(&y).for_each(|(d, y)| *d = *d * *y * (T::one() - *y));
                g
            }
            (Layer::Upsample2x, Cache::Upsample { in_shape }) => upsample_backward(in_shape, &dy),
            (Layer::Residual(inner), Cache::Residual(caches)) => {
                let mut grads = grads;
                let mut g = dy.clone();
                for (l, c) in inner.iter().zip(caches).rev() {
                    g = l.backward(params, c, g, grads.as_deref_mut());
                }
                g.add_assign(&dy).expect("residual gradient keeps shape");
                g
            }
            _ => panic!("layer/cache mismatch"),
        }
    }

    /// Parameter gradients only; the input gradient is not formed.
    pub fn backward_params<T: Scalar>(&self, params: &ParamSet<T>, cache: Cache<T>, dy: Tensor<T>, grads: &mut Grads<T>) {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => conv.param_grads(&cols, in_shape, &dy, grads),
            (l, c) => {
                l.backward(params, c, dy, Some(grads));
            }
        }
    }

    /// Output spatial size, or `None` when the input is too small.
    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(conv) => conv.output_size(h, w).map(|(oh, ow)| (conv.out_channels, oh, ow)),
            Layer::Upsample2x => Some((c, 2 * h, 2 * w)),
            Layer::Residual(inner) => {
                let mut d = (c, h, w);
                for l in inner {
                    d = l.output_dims(d.0, d.1, d.2)?;
                }
                Some(d)
            }
            _ => Some((c, h, w)),
        }
    }
}
