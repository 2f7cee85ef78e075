//! Fixed layer set with explicit forward and backward passes.
//!
//! Image tensors are `C x H x W` (a single sample); batching is done by the
//! callers, which accumulate parameter gradients sample by sample.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }

    fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        let padded = input + 2 * self.pad;
        if padded < kernel || (padded - kernel) % self.stride != 0 {
            return Err(Error::config(format!(
                "extent {input} with kernel {kernel}, pad {}, stride {} gives a non-integer output",
                self.pad, self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Unrolled input patches kept from the forward pass so the backward pass
/// does not rebuild them.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    geometry: ConvGeometry,
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geometry: ConvGeometry,
) -> Result<ConvDims> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::dim(format!(
            "conv2d input must be C x H x W, got {:?}",
            input.shape()
        )));
    };
    let &[c_out, wc_in, k, k2] = weights.shape() else {
        return Err(Error::dim(format!(
            "conv2d weights must be Cout x Cin x k x k, got {:?}",
            weights.shape()
        )));
    };
    if wc_in != c_in || k != k2 {
        return Err(Error::dim(format!(
            "conv2d weights {:?} do not fit input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::config(format!("conv2d kernel size {k} must be odd")));
    }
    if let Some(b) = bias {
        b.expect_shape(&[c_out])?;
    }
    let oh = geometry.output_extent(h, k)?;
    let ow = geometry.output_extent(w, k)?;
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        oh,
        ow,
    })
}

/// Output columns `ox` whose source column `ox * stride + kj - pad` lies
/// inside `0..w`.
fn valid_cols(d: &ConvDims, g: ConvGeometry, kj: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    // largest ox with ox * stride + kj - pad <= w - 1
    let hi = if d.w + g.pad > kj { (d.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    lo..hi.min(d.ow).max(lo)
}

fn im2col<S: Scalar>(input: &[S], d: &ConvDims, g: ConvGeometry) -> Vec<S> {
    let p = d.oh * d.ow;
    let mut cols = vec![S::zero(); d.c_in * d.k * d.k * p];
    for c in 0..d.c_in {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &mut cols[((c * d.k + ki) * d.k + kj) * p..][..p];
                let xs = valid_cols(d, g, kj);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= d.h as isize || xs.is_empty() {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    let ix0 = xs.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[xs.clone()].copy_from_slice(&src[ix0..ix0 + xs.len()]);
                    } else {
                        for (n, out) in dst[xs.clone()].iter_mut().enumerate() {
                            *out = src[ix0 + n * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], d: &ConvDims, g: ConvGeometry) -> Vec<S> {
    let p = d.oh * d.ow;
    let mut out = vec![S::zero(); d.c_in * d.h * d.w];
    for c in 0..d.c_in {
        let plane = &mut out[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &cols[((c * d.k + ki) * d.k + kj) * p..][..p];
                let xs = valid_cols(d, g, kj);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= d.h as isize || xs.is_empty() {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.ow..(oy + 1) * d.ow][xs.clone()];
                    let ix0 = xs.start * g.stride + kj - g.pad;
                    for (n, &v) in src.iter().enumerate() {
                        let ix = ix0 + n * g.stride;
                        dst[ix] = dst[ix] + v;
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of a `Cin x H x W` input with `Cout x Cin x k x k`
/// weights plus a per-output-channel bias.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    geometry: ConvGeometry,
) -> Result<Tensor<S>> {
    conv2d_cached(input, weights, bias, geometry).map(|(out, _)| out)
}

/// [`conv2d`] that also returns the patch cache for [`conv2d_backward_cached`].
pub fn conv2d_cached<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    geometry: ConvGeometry,
) -> Result<(Tensor<S>, ConvCache<S>)> {
    let d = conv_dims(input, weights, Some(bias), geometry)?;
    let cols = im2col(input.data(), &d, geometry);
    let p = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    let mut out = vec![S::zero(); d.c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[o]);
    }
    S::gemm(
        d.c_out,
        ckk,
        p,
        S::one(),
        weights.data(),
        ckk as isize,
        1,
        &cols,
        p as isize,
        1,
        S::one(),
        &mut out,
        p as isize,
        1,
    );
    let out = Tensor::from_parts(vec![d.c_out, d.oh, d.ow], out).checked("conv2d")?;
    let cache = ConvCache {
        cols,
        input_shape: [d.c_in, d.h, d.w],
        out_hw: (d.oh, d.ow),
        geometry,
    };
    Ok((out, cache))
}

/// Backward pass of [`conv2d`], rebuilding the input patches.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    geometry: ConvGeometry,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let d = conv_dims(input, weights, None, geometry)?;
    let cache = ConvCache {
        cols: im2col(input.data(), &d, geometry),
        input_shape: [d.c_in, d.h, d.w],
        out_hw: (d.oh, d.ow),
        geometry,
    };
    conv2d_backward_cached(&cache, weights, grad_out)
}

pub fn conv2d_backward_cached<S: Scalar>(
    cache: &ConvCache<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let [c_in, h, w] = cache.input_shape;
    let (oh, ow) = cache.out_hw;
    let &[c_out, _, k, _] = weights.shape() else {
        return Err(Error::dim("conv2d weights must be rank 4"));
    };
    grad_out.expect_shape(&[c_out, oh, ow])?;
    let d = ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        oh,
        ow,
    };
    let p = oh * ow;
    let ckk = c_in * k * k;
    let g = grad_out.data();

    let mut dw = vec![S::zero(); c_out * ckk];
    S::gemm(
        c_out,
        p,
        ckk,
        S::one(),
        g,
        p as isize,
        1,
        &cache.cols,
        1,
        p as isize,
        S::zero(),
        &mut dw,
        ckk as isize,
        1,
    );
    let db: Vec<S> = g.chunks(p).map(|row| row.iter().copied().sum()).collect();

    let mut dcols = vec![S::zero(); ckk * p];
    S::gemm(
        ckk,
        c_out,
        p,
        S::one(),
        weights.data(),
        1,
        ckk as isize,
        g,
        p as isize,
        1,
        S::zero(),
        &mut dcols,
        p as isize,
        1,
    );
    let dx = col2im(&dcols, &d, cache.geometry);
    Ok(ConvGrads {
        input: Tensor::from_parts(vec![c_in, h, w], dx).checked("conv2d_backward")?,
        weights: Tensor::from_parts(weights.shape().to_vec(), dw).checked("conv2d_backward")?,
        bias: Tensor::from_parts(vec![c_out], db).checked("conv2d_backward")?,
    })
}

/// Gradients of [`linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

fn linear_dims<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>) -> Result<(usize, usize)> {
    let &[m, n] = weights.shape() else {
        return Err(Error::dim(format!(
            "linear weights must be m x n, got {:?}",
            weights.shape()
        )));
    };
    if input.len() != n {
        return Err(Error::dim(format!(
            "linear input has {} values, weights expect {n}",
            input.len()
        )));
    }
    Ok((m, n))
}

/// `y = W x + b`.
pub fn linear<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = linear_dims(input, weights)?;
    bias.expect_shape(&[m])?;
    let x = input.data();
    let out = weights
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
        .collect();
    Tensor::from_parts(vec![m], out).checked("linear")
}

pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    let (m, n) = linear_dims(input, weights)?;
    grad_out.expect_shape(&[m])?;
    let x = input.data();
    let g = grad_out.data();
    let mut dx = vec![S::zero(); n];
    let mut dw = Vec::with_capacity(m * n);
    for (row, &gi) in weights.data().chunks(n).zip(g) {
        for (dxj, &w) in dx.iter_mut().zip(row) {
            *dxj = *dxj + w * gi;
        }
        dw.extend(x.iter().map(|&xj| gi * xj));
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx).checked("linear_backward")?,
        weights: Tensor::from_parts(vec![m, n], dw).checked("linear_backward")?,
        bias: grad_out.clone(),
    })
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.expect_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

fn spatial_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "spatial op needs rank >= 2, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// Output of [`pool_max2`]: the pooled tensor and, per output element, the
/// flat input index that won.
#[derive(Debug, Clone)]
pub struct PoolOutput<S> {
    pub output: Tensor<S>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2 over the trailing two axes. Ties resolve to
/// the first maximum in row-major order within the window.
pub fn pool_max2<S: Scalar>(input: &Tensor<S>) -> Result<PoolOutput<S>> {
    let (planes, h, w) = spatial_split(input.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "pool_max2 needs even spatial extents, got {h} x {w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(PoolOutput {
        output: Tensor::from_parts(shape, out),
        argmax,
    })
}

pub fn pool_max2_backward<S: Scalar>(
    argmax: &[usize],
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::dim(format!(
            "pool gradient has {} values for {} pooled outputs",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] = data[idx] + g;
    }
    Ok(dx)
}

/// Nearest-neighbour doubling of the trailing two axes.
pub fn upsample_nearest2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (planes, h, w) = spatial_split(input.shape())?;
    let x = input.data();
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for p in 0..planes {
        for y in 0..2 * h {
            let src = &x[p * h * w + (y / 2) * w..][..w];
            for &v in src {
                out.push(v);
                out.push(v);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    Ok(Tensor::from_parts(shape, out))
}

/// Sums each 2x2 block of the upsampled gradient back onto its source.
pub fn upsample_nearest2_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (planes, h, w) = spatial_split(input_shape)?;
    let mut expected = input_shape.to_vec();
    let r = expected.len();
    expected[r - 2] = 2 * h;
    expected[r - 1] = 2 * w;
    grad_out.expect_shape(&expected)?;
    let g = grad_out.data();
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            let row = &g[p * 4 * h * w + y * 2 * w..][..2 * w];
            let dst = &mut dx[p * h * w + (y / 2) * w..][..w];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = *d + row[2 * x] + row[2 * x + 1];
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Numerically stable softmax over all entries (max subtracted first).
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let z = logits.data();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    let probs = exps.into_iter().map(|e| e / total).collect();
    Tensor::from_parts(logits.shape().to_vec(), probs).checked("softmax")
}

/// Vector-Jacobian product of softmax: `p * (g - <p, g>)`.
pub fn softmax_backward<S: Scalar>(probs: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.expect_shape(probs.shape())?;
    let dot: S = probs
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| p * g)
        .sum();
    let data = probs
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| p * (g - dot))
        .collect();
    Ok(Tensor::from_parts(probs.shape().to_vec(), data))
}

/// Mean squared error of each leading-axis channel of two `N x H x W` stacks.
pub fn mse_per_channel<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Vec<S>> {
    target.expect_shape(pred.shape())?;
    if pred.shape().len() != 3 {
        return Err(Error::dim(format!(
            "mse_per_channel needs N x H x W, got {:?}",
            pred.shape()
        )));
    }
    let n = pred.shape()[0];
    let hw = S::from_usize(pred.len() / n).unwrap();
    let losses: Vec<S> = (0..n)
        .map(|c| {
            let sq: S = pred
                .slab(c)
                .iter()
                .zip(target.slab(c))
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            sq / hw
        })
        .collect();
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mse_per_channel"));
    }
    Ok(losses)
}

/// Gradient w.r.t. `pred` of the mean over channels of [`mse_per_channel`].
pub fn mse_mean_backward<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    target.expect_shape(pred.shape())?;
    let scale = S::from_f64_lossy(2.0) / S::from_usize(pred.len()).unwrap();
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Ok(Tensor::from_parts(pred.shape().to_vec(), data))
}

/// Stacks two `C x H x W` tensors along the channel axis.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::dim(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(
        vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
        data,
    ))
}

/// Inverse of [`concat_channels`]: splits off the first `channels` planes.
pub fn split_channels<S: Scalar>(t: &Tensor<S>, channels: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::dim("split_channels needs C x H x W"));
    };
    if channels == 0 || channels >= c {
        return Err(Error::dim(format!("cannot split {channels} of {c} channels")));
    }
    let (a, b) = t.data().split_at(channels * h * w);
    Ok((
        Tensor::from_parts(vec![channels, h, w], a.to_vec()),
        Tensor::from_parts(vec![c - channels, h, w], b.to_vec()),
    ))
}
