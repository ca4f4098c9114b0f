//! Layer kinds with analytic backward passes.
//!
//! Convolutions are lowered to GEMM through an im2col buffer. The transpose
//! convolution is the adjoint of the convolution with the same geometry, so the
//! two share `im2col`/`col2im` with roles swapped.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use super::NetError;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, padding }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Spatial size of a strided window sweep over an `h×w` plane.
    fn sweep(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k || s == 0 {
            return None;
        }
        Some(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }
}

/// Weight and bias of one parametrized layer. The stamp changes whenever the
/// values change, which lets backward reject caches from older parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weight: Vec<T>,
    pub weight_shape: [usize; 4],
    pub bias: Vec<T>,
    stamp: u64,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(weight_shape: [usize; 4], bias_len: usize) -> Self {
        Self {
            weight: vec![T::zero(); weight_shape.iter().product()],
            weight_shape,
            bias: vec![T::zero(); bias_len],
            stamp: fresh_stamp(),
        }
    }

    /// Records that `weight`/`bias` were modified in place.
    pub fn touch(&mut self) {
        self.stamp = fresh_stamp();
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            weight: self.weight.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
            weight_shape: self.weight_shape,
            bias: self.bias.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
            stamp: fresh_stamp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv {
        input: Tensor<T>,
        stamp: u64,
    },
    ConvTranspose {
        input: Tensor<T>,
        stamp: u64,
    },
    Relu {
        positive: Vec<bool>,
        shape: [usize; 4],
    },
    /// Window-local argmax (row-major 0..4) per output element.
    MaxPool {
        argmax: Vec<u8>,
        in_shape: [usize; 4],
    },
    ScoreFuse {
        shape: [usize; 4],
    },
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], ch: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let ohw = oh * ow;
    for c in 0..ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters-and-adds columns back into `out`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], ch: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, out: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let ohw = oh * ow;
    for c in 0..ch {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Scalar>(db: &mut [T], g: &[T], plane: usize) {
    for (d, chunk) in db.iter_mut().zip(g.chunks(plane)) {
        *d += chunk.iter().copied().sum::<T>();
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(), NetError> {
    let [n, c, _, _] = x.shape();
    if n == 0 || c != channels {
        return Err(NetError::ShapeMismatch(format!(
            "{what} expects {channels} input channels, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_grad<T: Scalar>(g: &Tensor<T>, expected: [usize; 4]) -> Result<(), NetError> {
    if g.shape() != expected {
        return Err(NetError::ShapeMismatch(format!(
            "gradient shape {:?} does not match forward output {:?}",
            g.shape(),
            expected
        )));
    }
    Ok(())
}

/// Cross-correlation plus bias. Weight layout `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub geom: ConvGeom,
    pub param: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(geom: ConvGeom) -> Self {
        let shape = [geom.out_ch, geom.in_ch, geom.kernel, geom.kernel];
        Self { geom, param: Param::zeros(shape, geom.out_ch) }
    }

    pub fn output_shape(&self, in_shape: [usize; 4]) -> Result<[usize; 4], NetError> {
        let [n, _, h, w] = in_shape;
        let (oh, ow) = self.geom.sweep(h, w).ok_or_else(|| {
            NetError::ShapeMismatch(format!(
                "input {h}x{w} is smaller than the {}x{} kernel",
                self.geom.kernel, self.geom.kernel
            ))
        })?;
        Ok([n, self.geom.out_ch, oh, ow])
    }

    fn item(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let g = &self.geom;
        let kk = g.in_ch * g.kernel * g.kernel;
        let ohw = oh * ow;
        let mut out = vec![T::zero(); g.out_ch * ohw];
        let weight = MatRef::new(&self.param.weight, g.out_ch, kk);
        if g.pointwise() {
            gemm(weight, MatRef::new(x, kk, ohw), &mut out, false);
        } else {
            let mut cols = vec![T::zero(); kk * ohw];
            im2col(x, g.in_ch, h, w, g, oh, ow, &mut cols);
            gemm(weight, MatRef::new(&cols, kk, ohw), &mut out, false);
        }
        add_bias(&mut out, &self.param.bias, ohw);
        out
    }

    /// Forward without keeping a cache.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        check_input(x, self.geom.in_ch, "conv")?;
        let out_shape = self.output_shape(x.shape())?;
        let [_, _, h, w] = x.shape();
        let [_, c, oh, ow] = out_shape;
        let items: Vec<Vec<T>> = (0..x.batch()).into_par_iter().map(|i| self.item(x.item(i), h, w, oh, ow)).collect();
        Ok(Tensor::from_items(items, [c, oh, ow]))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), NetError> {
        let y = self.apply(x)?;
        Ok((y, Cache::Conv { input: x.clone(), stamp: self.param.stamp }))
    }

    pub fn backward(&self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, ParamGrads<T>), NetError> {
        let Cache::Conv { input, stamp } = cache else {
            return Err(NetError::StaleCache("cache was not produced by a convolution".into()));
        };
        if *stamp != self.param.stamp {
            return Err(NetError::StaleCache("convolution parameters changed since forward".into()));
        }
        let out_shape = self.output_shape(input.shape())?;
        check_grad(grad_out, out_shape)?;
        let g = &self.geom;
        let [n, _, h, w] = input.shape();
        let [_, _, oh, ow] = out_shape;
        let kk = g.in_ch * g.kernel * g.kernel;
        let ohw = oh * ow;
        let weight = MatRef::new(&self.param.weight, g.out_ch, kk);

        let mut dw = vec![T::zero(); g.out_ch * kk];
        let mut db = vec![T::zero(); g.out_ch];
        let mut dx = Tensor::zeros(input.shape());
        let in_len = input.item_len();
        let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * ohw] };
        let mut dcols = cols.clone();
        for i in 0..n {
            let gi = MatRef::new(grad_out.item(i), g.out_ch, ohw);
            let xi = input.item(i);
            let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            if g.pointwise() {
                gemm(gi, MatRef::new(xi, kk, ohw).t(), &mut dw, true);
                gemm(weight.t(), gi, dxi, false);
            } else {
                im2col(xi, g.in_ch, h, w, g, oh, ow, &mut cols);
                gemm(gi, MatRef::new(&cols, kk, ohw).t(), &mut dw, true);
                gemm(weight.t(), gi, &mut dcols, false);
                col2im(&dcols, g.in_ch, h, w, g, oh, ow, dxi);
            }
            accumulate_bias_grad(&mut db, grad_out.item(i), ohw);
        }
        Ok((dx, ParamGrads { weight: dw, bias: db }))
    }
}

/// Learnable upsampling, the adjoint of a convolution with the same
/// geometry. Weight layout `(in, out, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T = f32> {
    pub geom: ConvGeom,
    pub param: Param<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn zeros(geom: ConvGeom) -> Self {
        let shape = [geom.in_ch, geom.out_ch, geom.kernel, geom.kernel];
        Self { geom, param: Param::zeros(shape, geom.out_ch) }
    }

    /// Channel-diagonal bilinear interpolation kernel, zero bias.
    pub fn bilinear(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let mut layer = Self::zeros(ConvGeom::new(channels, channels, kernel, stride, padding));
        let factor = kernel.div_ceil(2) as f64;
        let center = if kernel % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
        let taps: Vec<f64> = (0..kernel).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect();
        for c in 0..channels {
            let base = (c * channels + c) * kernel * kernel;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    layer.param.weight[base + ky * kernel + kx] = T::from_f64(taps[ky] * taps[kx]);
                }
            }
        }
        layer
    }

    pub fn output_shape(&self, in_shape: [usize; 4]) -> Result<[usize; 4], NetError> {
        let [n, _, h, w] = in_shape;
        let (k, s, p) = (self.geom.kernel, self.geom.stride, self.geom.padding);
        let span = |d: usize| (d.saturating_sub(1) * s + k).checked_sub(2 * p).filter(|&v| v > 0);
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) if h > 0 && w > 0 => Ok([n, self.geom.out_ch, oh, ow]),
            _ => Err(NetError::ShapeMismatch(format!("transpose convolution cannot upsample a {h}x{w} input"))),
        }
    }

    fn item(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let g = &self.geom;
        let kk = g.out_ch * g.kernel * g.kernel;
        let hw = h * w;
        let mut cols = vec![T::zero(); kk * hw];
        gemm(MatRef::new(&self.param.weight, g.in_ch, kk).t(), MatRef::new(x, g.in_ch, hw), &mut cols, false);
        let mut out = vec![T::zero(); g.out_ch * oh * ow];
        col2im(&cols, g.out_ch, oh, ow, g, h, w, &mut out);
        add_bias(&mut out, &self.param.bias, oh * ow);
        out
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        check_input(x, self.geom.in_ch, "transpose conv")?;
        let out_shape = self.output_shape(x.shape())?;
        let [_, _, h, w] = x.shape();
        let [_, c, oh, ow] = out_shape;
        let items: Vec<Vec<T>> = (0..x.batch()).into_par_iter().map(|i| self.item(x.item(i), h, w, oh, ow)).collect();
        Ok(Tensor::from_items(items, [c, oh, ow]))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), NetError> {
        let y = self.apply(x)?;
        Ok((y, Cache::ConvTranspose { input: x.clone(), stamp: self.param.stamp }))
    }

    pub fn backward(&self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, ParamGrads<T>), NetError> {
        let Cache::ConvTranspose { input, stamp } = cache else {
            return Err(NetError::StaleCache("cache was not produced by a transpose convolution".into()));
        };
        if *stamp != self.param.stamp {
            return Err(NetError::StaleCache("transpose convolution parameters changed since forward".into()));
        }
        let out_shape = self.output_shape(input.shape())?;
        check_grad(grad_out, out_shape)?;
        let g = &self.geom;
        let [n, _, h, w] = input.shape();
        let [_, _, oh, ow] = out_shape;
        let kk = g.out_ch * g.kernel * g.kernel;
        let hw = h * w;
        let weight = MatRef::new(&self.param.weight, g.in_ch, kk);

        let mut dw = vec![T::zero(); g.in_ch * kk];
        let mut db = vec![T::zero(); g.out_ch];
        let mut dx = Tensor::zeros(input.shape());
        let in_len = input.item_len();
        let mut gcols = vec![T::zero(); kk * hw];
        for i in 0..n {
            let gi = grad_out.item(i);
            im2col(gi, g.out_ch, oh, ow, g, h, w, &mut gcols);
            let gc = MatRef::new(&gcols, kk, hw);
            gemm(MatRef::new(input.item(i), g.in_ch, hw), gc.t(), &mut dw, true);
            gemm(weight, gc, &mut dx.data_mut()[i * in_len..(i + 1) * in_len], false);
            accumulate_bias_grad(&mut db, gi, oh * ow);
        }
        Ok((dx, ParamGrads { weight: dw, bias: db }))
    }
}

pub fn relu_apply<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let positive = x.data().iter().map(|&v| v > T::zero()).collect();
    (relu_apply(x), Cache::Relu { positive, shape: x.shape() })
}

pub fn relu_backward<T: Scalar>(cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let Cache::Relu { positive, shape } = cache else {
        return Err(NetError::StaleCache("cache was not produced by a ReLU".into()));
    };
    check_grad(grad_out, *shape)?;
    let data = grad_out.data().iter().zip(positive).map(|(&g, &p)| if p { g } else { T::zero() }).collect();
    Ok(Tensor::from_vec(*shape, data))
}

fn pool_shape(in_shape: [usize; 4]) -> Result<[usize; 4], NetError> {
    let [n, c, h, w] = in_shape;
    if h < 2 || w < 2 {
        return Err(NetError::ShapeMismatch(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    Ok([n, c, h / 2, w / 2])
}

/// 2×2 stride-2 max pooling; ties resolve to the first window element.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), NetError> {
    let out_shape = pool_shape(x.shape())?;
    let [n, c, h, w] = x.shape();
    let [_, _, oh, ow] = out_shape;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (0u8, plane[2 * oy * w + 2 * ox]);
                for (j, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                    if v > best.1 {
                        best = (j as u8 + 1, v);
                    }
                }
                out.push(best.1);
                argmax.push(best.0);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out), Cache::MaxPool { argmax, in_shape: x.shape() }))
}

pub fn maxpool_backward<T: Scalar>(cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let Cache::MaxPool { argmax, in_shape } = cache else {
        return Err(NetError::StaleCache("cache was not produced by max pooling".into()));
    };
    let out_shape = pool_shape(*in_shape)?;
    check_grad(grad_out, out_shape)?;
    let [_, _, h, w] = *in_shape;
    let [_, _, oh, ow] = out_shape;
    let mut dx = Tensor::zeros(*in_shape);
    let data = dx.data_mut();
    for (p, (g, a)) in grad_out.data().chunks(oh * ow).zip(argmax.chunks(oh * ow)).enumerate() {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = oy * ow + ox;
                let (dy, dx) = ((a[i] / 2) as usize, (a[i] % 2) as usize);
                plane[(2 * oy + dy) * w + 2 * ox + dx] += g[i];
            }
        }
    }
    Ok(dx)
}

/// Elementwise sum of two score maps.
pub fn score_fuse_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), NetError> {
    if a.shape() != b.shape() {
        return Err(NetError::ShapeMismatch(format!("cannot fuse score maps {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok((Tensor::from_vec(a.shape(), data), Cache::ScoreFuse { shape: a.shape() }))
}

pub fn score_fuse_backward<T: Scalar>(
    cache: &Cache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NetError> {
    let Cache::ScoreFuse { shape } = cache else {
        return Err(NetError::StaleCache("cache was not produced by score fusion".into()));
    };
    check_grad(grad_out, *shape)?;
    Ok((grad_out.clone(), grad_out.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    ConvTranspose,
    ScoreFuse,
}

/// Uniform front for every layer kind; ScoreFuse takes two inputs, the rest one.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool,
    ConvTranspose(ConvTranspose2d<T>),
    ScoreFuse,
}

#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub grad_inputs: Vec<Tensor<T>>,
    pub params: Option<ParamGrads<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool => LayerKind::MaxPool,
            Layer::ConvTranspose(_) => LayerKind::ConvTranspose,
            Layer::ScoreFuse => LayerKind::ScoreFuse,
        }
    }

    pub fn param(&self) -> Option<&Param<T>> {
        match self {
            Layer::Conv(c) => Some(&c.param),
            Layer::ConvTranspose(c) => Some(&c.param),
            _ => None,
        }
    }

    pub fn param_mut(&mut self) -> Option<&mut Param<T>> {
        match self {
            Layer::Conv(c) => Some(&mut c.param),
            Layer::ConvTranspose(c) => Some(&mut c.param),
            _ => None,
        }
    }

    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Cache<T>), NetError> {
        let arity = if matches!(self, Layer::ScoreFuse) { 2 } else { 1 };
        if inputs.len() != arity {
            return Err(NetError::ShapeMismatch(format!(
                "{:?} takes {arity} input(s), got {}",
                self.kind(),
                inputs.len()
            )));
        }
        match self {
            Layer::Conv(c) => c.forward(inputs[0]),
            Layer::Relu => Ok(relu_forward(inputs[0])),
            Layer::MaxPool => maxpool_forward(inputs[0]),
            Layer::ConvTranspose(c) => c.forward(inputs[0]),
            Layer::ScoreFuse => score_fuse_forward(inputs[0], inputs[1]),
        }
    }

    pub fn backward(&self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<Backward<T>, NetError> {
        let single = |g| Backward { grad_inputs: vec![g], params: None };
        match self {
            Layer::Conv(c) => {
                let (g, p) = c.backward(cache, grad_out)?;
                Ok(Backward { grad_inputs: vec![g], params: Some(p) })
            }
            Layer::ConvTranspose(c) => {
                let (g, p) = c.backward(cache, grad_out)?;
                Ok(Backward { grad_inputs: vec![g], params: Some(p) })
            }
            Layer::Relu => relu_backward(cache, grad_out).map(single),
            Layer::MaxPool => maxpool_backward(cache, grad_out).map(single),
            Layer::ScoreFuse => {
                let (a, b) = score_fuse_backward(cache, grad_out)?;
                Ok(Backward { grad_inputs: vec![a, b], params: None })
            }
        }
    }
}

pub fn layer_forward<T: Scalar>(layer: &Layer<T>, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Cache<T>), NetError> {
    layer.forward(inputs)
}

pub fn layer_backward<T: Scalar>(
    layer: &Layer<T>,
    cache: &Cache<T>,
    grad_out: &Tensor<T>,
) -> Result<Backward<T>, NetError> {
    layer.backward(cache, grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn pointwise_conv_scalar_affine() {
        let mut c = Conv2d::<f64>::zeros(ConvGeom::new(1, 1, 1, 1, 0));
        c.param.weight[0] = 2.0;
        c.param.bias[0] = 1.0;
        let (y, cache) = c.forward(&t([1, 1, 1, 1], vec![3.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let (dx, pg) = c.backward(&cache, &t([1, 1, 1, 1], vec![0.5])).unwrap();
        // dL/dw = input * grad_out, dL/dx = w * grad_out
        assert_eq!(pg.weight, vec![1.5]);
        assert_eq!(pg.bias, vec![0.5]);
        assert_eq!(dx.data(), &[1.0]);
    }

    #[test]
    fn normalized_kernel_preserves_constants() {
        let mut c = Conv2d::<f64>::zeros(ConvGeom::new(1, 1, 3, 1, 1));
        c.param.weight.fill(1.0 / 9.0);
        let y = c.apply(&t([1, 1, 5, 5], vec![4.0; 25])).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data()[yy * 5 + xx] - 4.0).abs() < 1e-12);
            }
        }
        // corners see only 4 of 9 taps under zero padding
        assert!((y.data()[0] - 4.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_shape() {
        let c = Conv2d::<f32>::zeros(ConvGeom::new(3, 2, 3, 2, 1));
        assert_eq!(c.output_shape([2, 3, 7, 8]).unwrap(), [2, 2, 4, 4]);
        assert!(c.apply(&Tensor::zeros([1, 4, 7, 8])).is_err());
        let big = Conv2d::<f32>::zeros(ConvGeom::new(1, 1, 7, 1, 0));
        assert!(big.output_shape([1, 1, 3, 3]).is_err());
    }

    #[test]
    fn maxpool_block() {
        let (y, cache) = maxpool_forward(&t([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let Cache::MaxPool { argmax, .. } = &cache else { unreachable!() };
        assert_eq!(argmax, &vec![1]);
        let dx = maxpool_backward(&cache, &t([1, 1, 1, 1], vec![2.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_backward_blocks_negative() {
        let (y, cache) = relu_forward(&t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&cache, &t([1, 1, 1, 3], vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn transpose_conv_shapes_match_decoder() {
        let up2 = ConvTranspose2d::<f32>::bilinear(2, 4, 2, 1);
        assert_eq!(up2.output_shape([1, 2, 7, 7]).unwrap(), [1, 2, 14, 14]);
        assert_eq!(up2.output_shape([1, 2, 14, 14]).unwrap(), [1, 2, 28, 28]);
        let up8 = ConvTranspose2d::<f32>::bilinear(2, 16, 8, 4);
        assert_eq!(up8.output_shape([1, 2, 28, 28]).unwrap(), [1, 2, 224, 224]);
    }

    #[test]
    fn bilinear_upsampling_preserves_constants() {
        for (k, s, p, n) in [(4, 2, 1, 6), (16, 8, 4, 4)] {
            let up = ConvTranspose2d::<f64>::bilinear(2, k, s, p);
            let y = up.apply(&t([1, 2, n, n], vec![3.0; 2 * n * n])).unwrap();
            let [_, c, oh, ow] = y.shape();
            for ch in 0..c {
                // interior: away from the outermost half-stride border
                for yy in s..oh - s {
                    for xx in s..ow - s {
                        let v = y.data()[(ch * oh + yy) * ow + xx];
                        assert!((v - 3.0).abs() < 1e-12, "k={k} ({yy},{xx}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut c = Conv2d::<f64>::zeros(ConvGeom::new(1, 1, 1, 1, 0));
        let x = t([1, 1, 1, 1], vec![1.0]);
        let (_, cache) = c.forward(&x).unwrap();
        c.param.weight[0] = 1.0;
        c.param.touch();
        let g = t([1, 1, 1, 1], vec![1.0]);
        assert!(matches!(c.backward(&cache, &g), Err(NetError::StaleCache(_))));
        let (_, relu_cache) = relu_forward(&x);
        assert!(matches!(c.backward(&relu_cache, &g), Err(NetError::StaleCache(_))));
        let (_, fresh) = c.forward(&x).unwrap();
        let wrong = t([1, 1, 1, 2], vec![1.0, 1.0]);
        assert!(matches!(c.backward(&fresh, &wrong), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn layer_front_checks_arity() {
        let x = t([1, 1, 2, 2], vec![1.0; 4]);
        assert!(Layer::<f64>::ScoreFuse.forward(&[&x]).is_err());
        assert!(Layer::<f64>::Relu.forward(&[&x, &x]).is_err());
        let (y, cache) = Layer::<f64>::ScoreFuse.forward(&[&x, &x]).unwrap();
        assert_eq!(y.data(), &[2.0; 4]);
        let b = Layer::<f64>::ScoreFuse.backward(&cache, &y).unwrap();
        assert_eq!(b.grad_inputs.len(), 2);
    }
}
