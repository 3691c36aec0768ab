//! Forward and backward kernels for the handful of layers the engine uses.
//!
//! Every function is pure: inputs are borrowed and results are freshly
//! allocated. Convolution is a stride-1 cross-correlation with zero padding;
//! pooling is 2x2 with stride 2.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn conv_out_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
) -> Result<ConvDims> {
    let (c_in, h, w) = input.dims3()?;
    let [c_out, k_in, kh, kw] = kernel.shape()[..] else {
        return Err(dim_err!("kernel must be 4-d, got {:?}", kernel.shape()));
    };
    if k_in != c_in {
        return Err(dim_err!(
            "kernel expects {k_in} input channels, input has {c_in}"
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(dim_err!("kernel extent must be odd, got {kh}x{kw}"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(dim_err!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        ));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh: h + 2 * padding - kh + 1,
        ow: w + 2 * padding - kw + 1,
    })
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Stride-1 zero-padded cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kH,kW]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    } = conv_out_dims(input, kernel, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    let pad = padding as isize;

    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..c_in {
                    let kbase = (co * c_in + ci) * kh * kw;
                    let xbase = ci * h * w;
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] * k[kbase + ky * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradients of `sum(grad_out * conv2d_forward(input, kernel))` with respect
/// to `input` and `kernel`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    } = conv_out_dims(input, kernel, padding)?;
    grad_out.expect_shape(&[c_out, oh, ow])?;

    let g = grad_out.data();
    let x = input.data();
    let k = kernel.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let pad = padding as isize;

    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(co * oh + oy) * ow + ox];
                if go == T::zero() {
                    continue;
                }
                for ci in 0..c_in {
                    let kbase = (co * c_in + ci) * kh * kw;
                    let xbase = ci * h * w;
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = row + ix as usize;
                            let ki = kbase + ky * kw + kx;
                            gx[xi] += go * k[ki];
                            gk[ki] += go * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
    ))
}

/// Input half of [`conv2d_backward`], skipping the kernel gradient.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    kernel: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    } = conv_out_dims(&probe, kernel, padding)?;
    grad_out.expect_shape(&[c_out, oh, ow])?;
    let g = grad_out.data();
    let k = kernel.data();
    let mut gx = probe.into_data();
    let pad = padding as isize;
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(co * oh + oy) * ow + ox];
                if go == T::zero() {
                    continue;
                }
                for ci in 0..c_in {
                    let kbase = (co * c_in + ci) * kh * kw;
                    let xbase = ci * h * w;
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[row + ix as usize] += go * k[kbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Adds `bias[c]` to every element of channel `c` of a `[C,H,W]` tensor.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    bias.expect_shape(&[c])?;
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = bias.data()[ch];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Gradient of `sum(grad_out * add_channel_bias(x, bias))` with respect to `bias`.
pub fn channel_bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = grad_out.dims3()?;
    let sums = grad_out
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum())
        .collect();
    Tensor::new(vec![c], sums)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

/// Flat indices (into the pooled input) of the element each output window selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolMask {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 stride-2 max pooling. Ties resolve to the first element in row-major
/// window order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolMask)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("max pooling needs even height and width, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        PoolMask {
            input_shape: vec![c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &PoolMask) -> Result<Tensor<T>> {
    if grad_out.len() != mask.argmax.len() {
        return Err(dim_err!(
            "pool gradient has {} elements, mask expects {}",
            grad_out.len(),
            mask.argmax.len()
        ));
    }
    let mut gx = Tensor::zeros(&mask.input_shape);
    let buf = gx.data_mut();
    for (&i, &g) in mask.argmax.iter().zip(grad_out.data()) {
        buf[i] += g;
    }
    Ok(gx)
}

/// `W x` for `W: [m,n]`, `x: [n]`.
pub fn matvec<T: Scalar>(weight: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = weight.dims2()?;
    if x.shape() != [n] {
        return Err(dim_err!(
            "matvec inner dimension: matrix {m}x{n}, vector {:?}",
            x.shape()
        ));
    }
    let out = weight
        .data()
        .chunks(n)
        .map(|row| row.iter().zip(x.data()).map(|(&a, &b)| a * b).sum())
        .collect();
    Tensor::new(vec![m], out)
}

/// Gradients of `sum(grad_out * matvec(W, x))` with respect to `W` and `x`.
pub fn matvec_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n) = weight.dims2()?;
    grad_out.expect_shape(&[m])?;
    x.expect_shape(&[n])?;
    let g = grad_out.data();
    let mut gw = Vec::with_capacity(m * n);
    for &gi in g {
        gw.extend(x.data().iter().map(|&xj| gi * xj));
    }
    let mut gx = vec![T::zero(); n];
    for (row, &gi) in weight.data().chunks(n).zip(g) {
        for (acc, &wij) in gx.iter_mut().zip(row) {
            *acc += gi * wij;
        }
    }
    Ok((Tensor::new(vec![m, n], gw)?, Tensor::new(vec![n], gx)?))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Gradient of `add` flows unchanged to both operands.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

pub fn scale_backward<T: Scalar>(grad_out: &Tensor<T>, factor: T) -> Tensor<T> {
    scale(grad_out, factor)
}

pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Takes the forward *output* `y = tanh(x)`; returns `(1 - y^2) * grad_out`.
pub fn tanh_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(y, |g, t| (T::one() - t * t) * g)
}

const MIN_NORM: f64 = 1e-12;

/// Scales a vector to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.norm();
    if !(n.as_f64() > MIN_NORM) {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n}"
        )));
    }
    Ok(x.map(|v| v / n))
}

/// Gradient through `y = x / |x|` given the input `x` and output `y`.
pub fn l2_normalize_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = x.norm();
    let proj = y.dot(grad_out)?;
    grad_out.zip_map(y, |g, yi| (g - yi * proj) / n)
}
