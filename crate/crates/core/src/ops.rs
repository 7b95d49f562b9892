//! Raw forward and backward kernels over [`Tensor`] values.
//!
//! Everything here is pure: no tape, no caching. The autograd graph and the
//! inference executor both call into these functions so that a given layer
//! produces the same bits regardless of which path evaluated it.
//!
//! Convolution accumulates every output element as
//! `bias + sum_ci sum_ky sum_kx w * x` in exactly that order. An input channel
//! that is identically zero therefore contributes only `+0.0` terms, and
//! leaving it out of the sum does not change the result.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Window {
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || extent + 2 * pad < k {
            return None;
        }
        Some((extent + 2 * pad - k) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            Self::out_extent(h, self.kh, self.stride, self.pad),
            Self::out_extent(w, self.kw, self.stride, self.pad),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::config(format!(
                "window {}x{} stride {} pad {} yields an empty output on a {h}x{w} input",
                self.kh, self.kw, self.stride, self.pad
            ))),
        }
    }

    /// Range of output columns whose tap `kx` lands inside an input row of width `w`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.pad > k {
            ((extent - 1 + self.pad - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn check_conv(input: Shape, weight: Shape, bias: Option<&[impl Sized]>, win: &Window) -> Result<(usize, usize)> {
    if weight.c != input.c {
        return Err(Error::config(format!(
            "conv weight {weight} expects {} input channels, got input {input}",
            weight.c
        )));
    }
    if weight.h != win.kh || weight.w != win.kw {
        return Err(Error::config(format!(
            "conv weight {weight} disagrees with window {}x{}",
            win.kh, win.kw
        )));
    }
    if let Some(b) = bias {
        if b.len() != weight.n {
            return Err(Error::config(format!(
                "conv bias has {} entries for {} kernels",
                b.len(),
                weight.n
            )));
        }
    }
    win.output_hw(input.h, input.w)
}

/// Computes one batch item of a convolution into `out` (`cout * oh * ow`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_item<T: Scalar>(
    input: &[T],
    in_shape: (usize, usize, usize),
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
    win: &Window,
    out_hw: (usize, usize),
    out: &mut [T],
) {
    let (cin, h, w) = in_shape;
    let (oh, ow) = out_hw;
    let (kh, kw, s, pad) = (win.kh, win.kw, win.stride, win.pad);
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias.map_or(T::zero(), |b| b[co]));
        for ci in 0..cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let wbase = (co * cin + ci) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = win.valid_range(ky, h, oh);
                for kx in 0..kw {
                    let wv = weight[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = win.valid_range(kx, w, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = ox_lo + kx - pad;
                            for (d, &x) in dst[ox_lo..ox_hi].iter_mut().zip(&row[off..]) {
                                *d += wv * x;
                            }
                        } else {
                            let off = ox_lo * s + kx - pad;
                            for (d, &x) in dst[ox_lo..ox_hi].iter_mut().zip(row[off..].iter().step_by(s)) {
                                *d += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `[cout, cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let win = Window {
        kh: ws.h,
        kw: ws.w,
        stride,
        pad,
    };
    let is = input.shape();
    let (oh, ow) = check_conv(is, ws, bias, &win)?;
    let out_shape = Shape::new(is.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..is.n {
        conv_item(
            input.item(n),
            (is.c, is.h, is.w),
            weight.data(),
            ws.n,
            bias,
            &win,
            (oh, ow),
            out.item_mut(n),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let is = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let win = Window {
        kh: ws.h,
        kw: ws.w,
        stride,
        pad,
    };
    let (cin, h, w) = (is.c, is.h, is.w);
    let (cout, oh, ow) = (os.c, os.h, os.w);
    let (kh, kw, s) = (ws.h, ws.w, stride);
    let mut g_in = Tensor::zeros(is);
    let mut g_w = Tensor::zeros(ws);
    let mut g_b = vec![T::zero(); cout];
    let wdata = weight.data();
    for n in 0..is.n {
        let x = input.item(n);
        let go = grad_out.item(n);
        let gi = g_in.item_mut(n);
        for co in 0..cout {
            let gplane = &go[co * oh * ow..(co + 1) * oh * ow];
            g_b[co] += gplane.iter().fold(T::zero(), |a, &v| a + v);
            for ci in 0..cin {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                let dst = &mut gi[ci * h * w..(ci + 1) * h * w];
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = win.valid_range(ky, h, oh);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = win.valid_range(kx, w, ow);
                        let wv = wdata[wbase + ky * kw + kx];
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                let ix = iy * w + ox * s + kx - pad;
                                let g = grow[ox];
                                acc += g * src[ix];
                                dst[ix] += wv * g;
                            }
                        }
                        g_w.data_mut()[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::config(format!("cannot average-pool empty planes of {s}")));
    }
    let inv = T::from_f64(s.plane() as f64).recip();
    let data = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_average_pool_backward<T: Scalar>(in_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv = T::from_f64(in_shape.plane() as f64).recip();
    let mut g = Tensor::zeros(in_shape);
    for (plane, &go) in g.data_mut().chunks_mut(in_shape.plane()).zip(grad_out.data()) {
        plane.fill(go * inv);
    }
    g
}

/// Logistic function `1 / (1 + exp(-k (x - x0)))`.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T, k: T, x0: T) -> T {
    let z = k * (x - x0);
    // Branch on sign so exp never overflows.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_param<T: Scalar>(x: &Tensor<T>, k: T, x0: T) -> Result<Tensor<T>> {
    if !(k > T::zero()) {
        return Err(Error::config(format!("sigmoid slope must be positive, got {k}")));
    }
    Ok(x.map(|v| sigmoid_scalar(v, k, x0)))
}

#[inline]
pub fn relu_scalar<T: Scalar>(x: T) -> T {
    // Returns +0.0 for every non-positive input, including -0.0.
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu_scalar)
}

fn check_same(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::config(format!("{what}: shape {a} does not match {b}")));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(a.shape(), b.shape(), "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(a.shape(), b.shape(), "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Scale factors for [`channel_scale`]: `[n, c, 1, 1]` or broadcast `[1, c, 1, 1]`.
fn scale_index(x: Shape, s: Shape) -> Result<impl Fn(usize, usize) -> usize> {
    if s.c != x.c || s.h != 1 || s.w != 1 || (s.n != x.n && s.n != 1) {
        return Err(Error::config(format!(
            "channel scale {s} does not fit feature map {x}"
        )));
    }
    let per_item = s.n != 1;
    Ok(move |n: usize, c: usize| if per_item { n * s.c + c } else { c })
}

/// Multiplies channel `c` of every item by its scale factor.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let idx = scale_index(xs, scale.shape())?;
    let mut out = x.clone();
    let plane = xs.plane();
    for n in 0..xs.n {
        let item = out.item_mut(n);
        for c in 0..xs.c {
            let f = scale.data()[idx(n, c)];
            for v in &mut item[c * plane..(c + 1) * plane] {
                *v = *v * f;
            }
        }
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ss = scale.shape();
    let per_item = ss.n != 1;
    let plane = xs.plane();
    let mut gx = Tensor::zeros(xs);
    let mut gs = Tensor::zeros(ss);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let si = if per_item { n * ss.c + c } else { c };
            let f = scale.data()[si];
            let base = xs.index(n, c, 0, 0);
            let mut acc = T::zero();
            for i in base..base + plane {
                let g = grad_out.data()[i];
                gx.data_mut()[i] = g * f;
                acc += g * x.data()[i];
            }
            gs.data_mut()[si] += acc;
        }
    }
    (gx, gs)
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index that won (first maximum in scan order).
pub fn max_pool<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let win = Window::square(size, stride, 0);
    let (oh, ow) = win.output_hw(s.h, s.w)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out_shape.numel()];
    let data = x.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * s.w + ox * stride;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = base + (oy * stride + ky) * s.w + ox * stride + kx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.data_mut()[o] = data[best];
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward<T: Scalar>(in_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(in_shape);
    for (&i, &go) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i] += go;
    }
    g
}

/// Fully-connected layer on the flattened items of `x`.
/// `weight` is `[out, features, 1, 1]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let features = xs.item_len();
    if ws.item_len() != features {
        return Err(Error::config(format!(
            "fully-connected weight {ws} expects {} features, input {xs} has {features}",
            ws.item_len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::config(format!(
                "fully-connected bias has {} entries for {} outputs",
                b.len(),
                ws.n
            )));
        }
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
    for n in 0..xs.n {
        let xi = x.item(n);
        for o in 0..ws.n {
            let row = weight.item(o);
            let mut acc = bias.map_or(T::zero(), |b| b[o]);
            for (&wv, &xv) in row.iter().zip(xi) {
                acc += wv * xv;
            }
            out.data_mut()[n * ws.n + o] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = vec![T::zero(); ws.n];
    for n in 0..xs.n {
        let xi = x.item(n);
        for o in 0..ws.n {
            let g = grad_out.data()[n * ws.n + o];
            gb[o] += g;
            let row = weight.item(o);
            for (gxv, &wv) in gx.item_mut(n).iter_mut().zip(row) {
                *gxv += g * wv;
            }
            for (gwv, &xv) in gw.item_mut(o).iter_mut().zip(xi) {
                *gwv += g * xv;
            }
        }
    }
    (gx, gw, gb)
}

/// Mean softmax cross-entropy of `[n, classes, 1, 1]` logits.
/// Returns the loss and the per-item softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let s = logits.shape();
    let k = s.item_len();
    if labels.len() != s.n {
        return Err(Error::Data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut probs = vec![T::zero(); s.numel()];
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        let z = logits.item(n);
        let m = z.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let p = &mut probs[n * k..(n + 1) * k];
        let mut denom = T::zero();
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            denom += *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / denom;
        }
        total += denom.ln() + m - z[label];
    }
    Ok((total / T::from_f64(s.n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    shape: Shape,
    probs: &[T],
    labels: &[usize],
    grad_out: T,
) -> Tensor<T> {
    let k = shape.item_len();
    let scale = grad_out / T::from_f64(shape.n as f64);
    let mut g = probs.to_vec();
    for (n, &label) in labels.iter().enumerate() {
        g[n * k + label] -= T::one();
    }
    for v in &mut g {
        *v = *v * scale;
    }
    Tensor::from_vec(shape, g).expect("shape matches probabilities")
}

/// L1 norm of all elements.
pub fn sum_abs<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().fold(T::zero(), |a, &v| a + v.abs())
}
