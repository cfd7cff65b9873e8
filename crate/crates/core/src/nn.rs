//! A small CPU network engine: layers that read their weights from one flat
//! parameter vector and accumulate gradients into a matching flat vector.
//!
//! Layers work on a single sample. Batches are formed by running samples
//! independently (see [`crate::exec::ExecMode`]) and summing their gradient
//! vectors in sample order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::FeatureMap;

/// Hands out contiguous ranges of the flat parameter vector.
#[derive(Debug, Default, Clone)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let at = self.len;
        self.len += n;
        at
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: usize,
    bias: Option<usize>,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        alloc: &mut ParamAlloc,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = alloc.take(out_channels * in_channels * kernel * kernel);
        let bias = bias.then(|| alloc.take(out_channels));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight..self.weight + self.weight_len()
    }

    pub fn bias_range(&self) -> Option<std::ops::Range<usize>> {
        self.bias.map(|b| b..b + self.out_channels)
    }

    /// He-normal weights, zero bias.
    pub fn init_he(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        self.init_normal(params, rng, (2.0 / fan_in).sqrt());
    }

    pub fn init_normal(&self, params: &mut [f64], rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for w in &mut params[self.weight_range()] {
            *w = normal.sample(rng);
        }
        if let Some(r) = self.bias_range() {
            params[r].fill(0.0);
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let npos = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * npos];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c_in, h, w) = shape;
        let k = self.kernel;
        let npos = oh * ow;
        let pad = self.padding as isize;
        let mut dx = FeatureMap::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let kk = self.in_channels * self.kernel * self.kernel;
        let npos = oh * ow;
        let mut y = FeatureMap::zeros(self.out_channels, oh, ow);
        let w = &params[self.weight_range()];
        gemm(
            self.out_channels,
            kk,
            npos,
            (w, kk as isize, 1),
            (&cols, npos as isize, 1),
            0.0,
            (&mut y.data, npos as isize),
        );
        if let Some(r) = self.bias_range() {
            for (c, b) in params[r].iter().enumerate() {
                for v in y.plane_mut(c) {
                    *v += b;
                }
            }
        }
        let cache = ConvCache {
            cols,
            in_shape: x.shape(),
        };
        (y, cache)
    }

    /// Accumulates weight/bias gradients; returns the input gradient if asked.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let kk = self.in_channels * self.kernel * self.kernel;
        let (oh, ow) = (dy.height, dy.width);
        let npos = oh * ow;
        gemm(
            self.out_channels,
            npos,
            kk,
            (&dy.data, npos as isize, 1),
            (&cache.cols, 1, npos as isize),
            1.0,
            (&mut grads[self.weight_range()], kk as isize),
        );
        if let Some(r) = self.bias_range() {
            for (c, g) in grads[r].iter_mut().enumerate() {
                *g += dy.plane(c).iter().sum::<f64>();
            }
        }
        if !want_input_grad {
            return None;
        }
        let w = &params[self.weight_range()];
        let mut dcols = vec![0.0; kk * npos];
        gemm(
            kk,
            self.out_channels,
            npos,
            (w, 1, kk as isize),
            (&dy.data, npos as isize, 1),
            0.0,
            (&mut dcols, npos as isize),
        );
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }
}

/// `c = alpha·c + a·b` for row-major `c` (m × n); `a` is m × k and `b` is
/// k × n, each given with arbitrary row/column strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.0.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides, since all three operands are dense m×k, k×n, m×n blocks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}

/// Learnable per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    pub channels: usize,
    scale: usize,
    shift: usize,
}

impl ChannelAffine {
    pub fn new(alloc: &mut ParamAlloc, channels: usize) -> Self {
        Self {
            channels,
            scale: alloc.take(channels),
            shift: alloc.take(channels),
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        params[self.scale..self.scale + self.channels].fill(1.0);
        params[self.shift..self.shift + self.channels].fill(0.0);
    }

    fn forward(&self, params: &[f64], x: &FeatureMap) -> FeatureMap {
        let mut y = x.clone();
        for c in 0..self.channels {
            let (s, b) = (params[self.scale + c], params[self.shift + c]);
            for v in y.plane_mut(c) {
                *v = *v * s + b;
            }
        }
        y
    }

    fn backward(&self, params: &[f64], x: &FeatureMap, dy: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let s = params[self.scale + c];
            let (mut ds, mut db) = (0.0, 0.0);
            for ((d, &xv), &g) in dx.plane_mut(c).iter_mut().zip(x.plane(c)).zip(dy.plane(c)) {
                ds += g * xv;
                db += g;
                *d = g * s;
            }
            grads[self.scale + c] += ds;
            grads[self.shift + c] += db;
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Pool {
    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn max_forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
        let (oh, ow) = self.out_size(x.height, x.width);
        let mut y = FeatureMap::zeros(x.channels, oh, ow);
        let mut arg = vec![0usize; x.channels * oh * ow];
        let pad = self.padding as isize;
        for c in 0..x.channels {
            let plane = x.plane(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let i = iy as usize * x.width + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = oy * ow + ox;
                    y.plane_mut(c)[o] = best;
                    arg[c * oh * ow + o] = best_i;
                }
            }
        }
        (y, arg)
    }

    fn avg_forward(&self, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.out_size(x.height, x.width);
        let mut y = FeatureMap::zeros(x.channels, oh, ow);
        let norm = (self.kernel * self.kernel) as f64;
        for c in 0..x.channels {
            let plane = x.plane(c);
            let out = y.plane_mut(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            s += plane[(oy * self.stride + ky) * x.width + ox * self.stride + kx];
                        }
                    }
                    out[oy * ow + ox] = s / norm;
                }
            }
        }
        y
    }

    fn avg_backward(&self, in_shape: (usize, usize, usize), dy: &FeatureMap) -> FeatureMap {
        let (c_in, h, w) = in_shape;
        let mut dx = FeatureMap::zeros(c_in, h, w);
        let norm = (self.kernel * self.kernel) as f64;
        for c in 0..c_in {
            let g = dy.plane(c);
            let out = dx.plane_mut(c);
            for oy in 0..dy.height {
                for ox in 0..dy.width {
                    let v = g[oy * dy.width + ox] / norm;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            out[(oy * self.stride + ky) * w + ox * self.stride + kx] += v;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    Affine(ChannelAffine),
    MaxPool(Pool),
    AvgPool(Pool),
}

enum LayerCache {
    Conv(ConvCache),
    Relu(FeatureMap),
    Affine(FeatureMap),
    MaxPool((usize, usize, usize), Vec<usize>),
    AvgPool((usize, usize, usize)),
}

/// A chain of layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

pub struct SequentialCache(Vec<LayerCache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init_he(&self, params: &mut [f64], rng: &mut impl Rng) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => c.init_he(params, rng),
                Layer::Affine(a) => a.init(params),
                _ => {}
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, SequentialCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward(params, &cur);
                    caches.push(LayerCache::Conv(cache));
                    y
                }
                Layer::Relu => {
                    for v in &mut cur.data {
                        *v = v.max(0.0);
                    }
                    caches.push(LayerCache::Relu(cur.clone()));
                    cur
                }
                Layer::Affine(a) => {
                    let y = a.forward(params, &cur);
                    caches.push(LayerCache::Affine(cur));
                    y
                }
                Layer::MaxPool(p) => {
                    let (y, arg) = p.max_forward(&cur);
                    caches.push(LayerCache::MaxPool(cur.shape(), arg));
                    y
                }
                Layer::AvgPool(p) => {
                    let y = p.avg_forward(&cur);
                    caches.push(LayerCache::AvgPool(cur.shape()));
                    y
                }
            };
        }
        (cur, SequentialCache(caches))
    }

    /// Inference-only forward that keeps no caches.
    pub fn apply(&self, params: &[f64], x: &FeatureMap) -> FeatureMap {
        self.forward(params, x).0
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &SequentialCache,
        dy: FeatureMap,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let mut g = dy;
        for (i, (layer, c)) in self.layers.iter().zip(&cache.0).enumerate().rev() {
            let need = want_input_grad || i > 0;
            g = match (layer, c) {
                (Layer::Conv(conv), LayerCache::Conv(cc)) => conv.backward(params, cc, &g, grads, need)?,
                (Layer::Relu, LayerCache::Relu(out)) => {
                    for (d, &o) in g.data.iter_mut().zip(&out.data) {
                        if o <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    g
                }
                (Layer::Affine(a), LayerCache::Affine(x)) => a.backward(params, x, &g, grads),
                (Layer::MaxPool(_), LayerCache::MaxPool(shape, arg)) => {
                    let mut dx = FeatureMap::zeros(shape.0, shape.1, shape.2);
                    let n = g.plane_len();
                    for c in 0..shape.0 {
                        let src = g.plane(c);
                        let dst = dx.plane_mut(c);
                        for (o, &v) in src.iter().enumerate() {
                            dst[arg[c * n + o]] += v;
                        }
                    }
                    dx
                }
                (Layer::AvgPool(p), LayerCache::AvgPool(shape)) => p.avg_backward(*shape, &g),
                _ => unreachable!("cache does not match layer"),
            };
        }
        Some(g)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Sums per-sample gradient vectors in sample order.
pub fn sum_gradients(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, g) in total.iter_mut().zip(&part) {
            *t += g;
        }
    }
    total
}
