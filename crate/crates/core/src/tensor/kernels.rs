//! Forward and backward kernels over plain tensors.
//!
//! Forward functions are public so callers can run them outside a [`Graph`](super::Graph).
//! Backward functions recompute whatever statistics they need from the saved
//! inputs instead of caching intermediates.

use super::gemm::sgemm;
use super::{Activation, ConvSpec, NormMode, PoolKind, RunningStats, Tensor, NORM_EPS};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// convolution

/// Output indices `o` with `0 <= o*stride + offset - pad < in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let (s, p, off, len) = (stride as i64, pad as i64, offset as i64, in_len as i64);
    let lo = if p > off { (p - off + s - 1) / s } else { 0 };
    let top = len - 1 + p - off;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = lo.min(out_len as i64) as usize;
    let hi = hi.min(out_len as i64) as usize;
    (lo, hi.max(lo))
}

fn check_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<(usize, usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input channel dimension is {c} but spec.in_channels is {}", spec.in_channels),
        ));
    }
    let want = spec.weight_shape();
    if w.shape() != want {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {:?} does not match (out, in/groups, kh, kw) = {:?}", w.shape(), want),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match out_channels {}", b.shape(), spec.out_channels),
            ));
        }
    }
    let (oh, ow) = spec.output_hw(h, wd)?;
    Ok((n, c, h, wd, oh, ow))
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.groups == 1 && spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
}

/// Unfolds one image `[C, H, W]` into `[C·kh·kw, oh·ow]`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f32]) {
    let (kh, kw) = spec.kernel;
    let p = oh * ow;
    cols.fill(0.0);
    for ki in 0..kh {
        let (oy_lo, oy_hi) = valid_range(oh, h, spec.stride.0, spec.padding.0, ki * spec.dilation.0);
        for kj in 0..kw {
            let (ox_lo, ox_hi) = valid_range(ow, w, spec.stride.1, spec.padding.1, kj * spec.dilation.1);
            for ci in 0..c {
                let row = (ci * kh + ki) * kw + kj;
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * spec.stride.0 + ki * spec.dilation.0 - spec.padding.0;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        out_row[ox] = src[ox * spec.stride.1 + kj * spec.dilation.1 - spec.padding.1];
                    }
                }
            }
        }
    }
}

/// Folds `[C·kh·kw, oh·ow]` columns back into an image gradient, accumulating.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, x: &mut [f32]) {
    let (kh, kw) = spec.kernel;
    let p = oh * ow;
    for ki in 0..kh {
        let (oy_lo, oy_hi) = valid_range(oh, h, spec.stride.0, spec.padding.0, ki * spec.dilation.0);
        for kj in 0..kw {
            let (ox_lo, ox_hi) = valid_range(ow, w, spec.stride.1, spec.padding.1, kj * spec.dilation.1);
            for ci in 0..c {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let plane = &mut x[ci * h * w..(ci + 1) * h * w];
                for oy in oy_lo..oy_hi {
                    let iy = oy * spec.stride.0 + ki * spec.dilation.0 - spec.padding.0;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * spec.stride.1 + kj * spec.dilation.1 - spec.padding.1] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation with zero padding, dilation and groups.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, h, wd, oh, ow) = check_conv(x, w, b, spec)?;
    let co = spec.out_channels;
    let p = oh * ow;
    let mut out = vec![0.0f32; n * co * p];
    if spec.groups == 1 {
        let k = c * spec.kernel.0 * spec.kernel.1;
        let mut cols = if is_pointwise(spec) { Vec::new() } else { vec![0.0f32; k * p] };
        for ni in 0..n {
            let xin = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            let dst = &mut out[ni * co * p..(ni + 1) * co * p];
            let colref: &[f32] = if is_pointwise(spec) {
                xin
            } else {
                im2col(xin, c, h, wd, spec, oh, ow, &mut cols);
                &cols
            };
            sgemm(co, k, p, w.data(), false, colref, false, dst, 0.0);
        }
    } else {
        grouped_forward(x.data(), w.data(), spec, (n, c, h, wd, oh, ow), &mut out);
    }
    if let Some(b) = b {
        for ni in 0..n {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut out[(ni * co + o) * p..(ni * co + o + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

fn grouped_forward(x: &[f32], w: &[f32], spec: &ConvSpec, dims: (usize, usize, usize, usize, usize, usize), out: &mut [f32]) {
    let (n, c, h, wd, oh, ow) = dims;
    let (kh, kw) = spec.kernel;
    let cin_g = c / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let co = spec.out_channels;
    for ni in 0..n {
        for o in 0..co {
            let g = o / cout_g;
            let dst = &mut out[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let plane = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, spec.stride.0, spec.padding.0, ki * spec.dilation.0);
                    for kj in 0..kw {
                        let wv = w[((o * cin_g + cl) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(ow, wd, spec.stride.1, spec.padding.1, kj * spec.dilation.1);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let xoff = kj * spec.dilation.1;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * spec.stride.0 + ki * spec.dilation.0 - spec.padding.0;
                            let src = &plane[iy * wd..(iy + 1) * wd];
                            let row = &mut dst[oy * ow..(oy + 1) * ow];
                            if spec.stride.1 == 1 {
                                let start = ox_lo + xoff - spec.padding.1;
                                for (r, s) in row[ox_lo..ox_hi].iter_mut().zip(&src[start..start + (ox_hi - ox_lo)]) {
                                    *r += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row[ox] += wv * src[ox * spec.stride.1 + xoff - spec.padding.1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    with_bias: bool,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (n, c, h, wd, oh, ow) = check_conv(x, w, None, spec)?;
    let co = spec.out_channels;
    let p = oh * ow;
    if gout.shape() != [n, co, oh, ow] {
        return Err(Error::shape("conv2d_backward", format!("gradient shape {:?} != output shape {:?}", gout.shape(), [n, co, oh, ow])));
    }
    let mut gx = vec![0.0f32; x.numel()];
    let mut gw = vec![0.0f32; w.numel()];
    let g = gout.data();
    if spec.groups == 1 {
        let k = c * spec.kernel.0 * spec.kernel.1;
        let pointwise = is_pointwise(spec);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; k * p] };
        let mut gcols = vec![0.0f32; k * p];
        for ni in 0..n {
            let xin = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            let gn = &g[ni * co * p..(ni + 1) * co * p];
            let colref: &[f32] = if pointwise {
                xin
            } else {
                im2col(xin, c, h, wd, spec, oh, ow, &mut cols);
                &cols
            };
            // gW[co, k] += gout[co, p] · cols[k, p]^T
            sgemm(co, p, k, gn, false, colref, true, &mut gw, 1.0);
            // gcols[k, p] = W[co, k]^T · gout[co, p]
            let gxn = &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd];
            if pointwise {
                sgemm(k, co, p, w.data(), true, gn, false, gxn, 1.0);
            } else {
                sgemm(k, co, p, w.data(), true, gn, false, &mut gcols, 0.0);
                col2im(&gcols, c, h, wd, spec, oh, ow, gxn);
            }
        }
    } else {
        grouped_backward(x.data(), w.data(), spec, (n, c, h, wd, oh, ow), g, &mut gx, &mut gw);
    }
    let gb = with_bias.then(|| {
        let mut gb = vec![0.0f32; co];
        for ni in 0..n {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += g[(ni * co + o) * p..(ni * co + o + 1) * p].iter().sum::<f32>();
            }
        }
        Tensor { shape: vec![co], data: gb }
    });
    Ok((
        Tensor { shape: x.shape().to_vec(), data: gx },
        Tensor { shape: w.shape().to_vec(), data: gw },
        gb,
    ))
}

#[allow(clippy::too_many_arguments)]
fn grouped_backward(
    x: &[f32],
    w: &[f32],
    spec: &ConvSpec,
    dims: (usize, usize, usize, usize, usize, usize),
    g: &[f32],
    gx: &mut [f32],
    gw: &mut [f32],
) {
    let (n, c, h, wd, oh, ow) = dims;
    let (kh, kw) = spec.kernel;
    let cin_g = c / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let co = spec.out_channels;
    for ni in 0..n {
        for o in 0..co {
            let grp = o / cout_g;
            let gplane = &g[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let base = (ni * c + ci) * h * wd;
                for ki in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, spec.stride.0, spec.padding.0, ki * spec.dilation.0);
                    for kj in 0..kw {
                        let widx = ((o * cin_g + cl) * kh + ki) * kw + kj;
                        let wv = w[widx];
                        let (ox_lo, ox_hi) = valid_range(ow, wd, spec.stride.1, spec.padding.1, kj * spec.dilation.1);
                        let xoff = kj * spec.dilation.1;
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * spec.stride.0 + ki * spec.dilation.0 - spec.padding.0;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * spec.stride.1 + xoff - spec.padding.1;
                                let xi = base + iy * wd + ix;
                                acc += grow[ox] * x[xi];
                                gx[xi] += wv * grow[ox];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// activations

pub fn hardswish(x: &Tensor) -> Tensor {
    activation(x, Activation::HardSwish)
}

pub fn activation(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::HardSwish => x.map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0),
    }
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Subgradient 0 is used at the kinks (`relu` at 0, `hardswish` at ±3).
pub fn activation_backward(x: &Tensor, out: &Tensor, act: Activation, gout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(out.data())
        .zip(gout.data())
        .map(|((&v, &y), &g)| {
            let d = match act {
                Activation::Relu => {
                    if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::LeakyRelu(s) => {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        s
                    } else {
                        0.0
                    }
                }
                Activation::Sigmoid => y * (1.0 - y),
                Activation::HardSwish => {
                    if v > -3.0 && v < 3.0 {
                        (2.0 * v + 3.0) / 6.0
                    } else if v > 3.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            g * d
        })
        .collect();
    Tensor { shape: x.shape().to_vec(), data }
}

// ---------------------------------------------------------------------------
// normalization

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("gamma {:?} / beta {:?} must both have shape [{c}] to match the channel axis", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Layer norm over the channel axis at each `(n, h, w)` location.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check_affine("layer_norm", c, gamma, beta)?;
    let hw = h * w;
    let mut out = vec![0.0f32; x.numel()];
    let xd = x.data();
    for ni in 0..n {
        for s in 0..hw {
            let at = |ci: usize| (ni * c + ci) * hw + s;
            let (mean, rstd) = moments((0..c).map(|ci| xd[at(ci)]), c);
            for ci in 0..c {
                out[at(ci)] = (xd[at(ci)] - mean) * rstd * gamma.data()[ci] + beta.data()[ci];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean and reciprocal standard deviation (biased variance plus epsilon).
fn moments(values: impl Iterator<Item = f32> + Clone, count: usize) -> (f32, f32) {
    let m = count as f64;
    let mean = values.clone().map(f64::from).sum::<f64>() / m;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / m;
    (mean as f32, (1.0 / (var + f64::from(NORM_EPS)).sqrt()) as f32)
}

pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let (xd, g, gm) = (x.data(), gout.data(), gamma.data());
    let mut gx = vec![0.0f32; x.numel()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    let mut xhat = vec![0.0f32; c];
    let mut gxhat = vec![0.0f32; c];
    for ni in 0..n {
        for s in 0..hw {
            let at = |ci: usize| (ni * c + ci) * hw + s;
            let (mean, rstd) = moments((0..c).map(|ci| xd[at(ci)]), c);
            let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
            for ci in 0..c {
                xhat[ci] = (xd[at(ci)] - mean) * rstd;
                gxhat[ci] = g[at(ci)] * gm[ci];
                sum_g += gxhat[ci];
                sum_gx += gxhat[ci] * xhat[ci];
                ggamma[ci] += g[at(ci)] * xhat[ci];
                gbeta[ci] += g[at(ci)];
            }
            let inv_c = 1.0 / c as f32;
            for ci in 0..c {
                gx[at(ci)] = rstd * (gxhat[ci] - sum_g * inv_c - xhat[ci] * sum_gx * inv_c);
            }
        }
    }
    Ok((
        Tensor { shape: x.shape().to_vec(), data: gx },
        Tensor { shape: vec![c], data: ggamma },
        Tensor { shape: vec![c], data: gbeta },
    ))
}

/// Per-channel mean and variance actually used to normalize a batch.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Batch norm over `(N, H, W)` per channel. Train mode updates `stats` in place.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: NormMode,
) -> Result<(Tensor, BatchMoments)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine("batch_norm", c, gamma, beta)?;
    if stats.channels() != c {
        return Err(Error::shape("batch_norm", format!("running stats hold {} channels, input has {c}", stats.channels())));
    }
    let hw = h * w;
    let xd = x.data();
    let plane = |ni: usize, ci: usize| &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
    let moments = match mode {
        NormMode::Train => {
            let count = n * hw;
            let mut mean = vec![0.0f32; c];
            let mut rstd = vec![0.0f32; c];
            for ci in 0..c {
                let values = (0..n).flat_map(|ni| plane(ni, ci).iter().copied());
                let m = values.clone().map(f64::from).sum::<f64>() / count as f64;
                let var = values.map(|v| (f64::from(v) - m).powi(2)).sum::<f64>() / count as f64;
                mean[ci] = m as f32;
                rstd[ci] = (1.0 / (var + f64::from(NORM_EPS)).sqrt()) as f32;
                let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                let mom = stats.momentum;
                stats.mean[ci] = (1.0 - mom) * stats.mean[ci] + mom * m as f32;
                stats.var[ci] = (1.0 - mom) * stats.var[ci] + mom * unbiased as f32;
            }
            stats.initialized = true;
            BatchMoments { mean, rstd }
        }
        NormMode::Eval => {
            if !stats.initialized {
                return Err(Error::InvalidArgument("batch_norm in eval mode needs initialized running statistics".into()));
            }
            BatchMoments {
                mean: stats.mean.clone(),
                rstd: stats.var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
            }
        }
    };
    let mut out = vec![0.0f32; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let scale = moments.rstd[ci] * gamma.data()[ci];
            let shift = beta.data()[ci] - moments.mean[ci] * scale;
            let off = (ni * c + ci) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(plane(ni, ci)) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((Tensor { shape: x.shape().to_vec(), data: out }, moments))
}

pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    moments: &BatchMoments,
    mode: NormMode,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f32;
    let (xd, g) = (x.data(), gout.data());
    let mut gx = vec![0.0f32; x.numel()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ci in 0..c {
        let (mean, rstd, gm) = (moments.mean[ci], moments.rstd[ci], gamma.data()[ci]);
        let (mut sum_g, mut sum_gxhat) = (0.0f32, 0.0f32);
        for ni in 0..n {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                let xhat = (xd[i] - mean) * rstd;
                sum_g += g[i];
                sum_gxhat += g[i] * xhat;
            }
        }
        ggamma[ci] = sum_gxhat;
        gbeta[ci] = sum_g;
        for ni in 0..n {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                gx[i] = match mode {
                    NormMode::Eval => g[i] * gm * rstd,
                    NormMode::Train => {
                        let xhat = (xd[i] - mean) * rstd;
                        gm * rstd * (g[i] - sum_g / count - xhat * sum_gxhat / count)
                    }
                };
            }
        }
    }
    Ok((
        Tensor { shape: x.shape().to_vec(), data: gx },
        Tensor { shape: vec![c], data: ggamma },
        Tensor { shape: vec![c], data: gbeta },
    ))
}

// ---------------------------------------------------------------------------
// pooling and resampling

/// Windowed pooling over `(H, W)` without padding.
pub fn pool2d(x: &Tensor, kind: PoolKind, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = pool_out(h, w, window, stride)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let xd = x.data();
    for nc in 0..n * c {
        let plane = &xd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = window_cells(oy, ox, window, stride, w);
                out[(nc * oh + oy) * ow + ox] = match kind {
                    PoolKind::Avg => cells.map(|i| plane[i]).sum::<f32>() / (window.0 * window.1) as f32,
                    PoolKind::Max => cells.map(|i| plane[i]).fold(f32::NEG_INFINITY, f32::max),
                };
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn pool_out(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<(usize, usize)> {
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidArgument(format!("pool window {window:?} / stride {stride:?} must be non-empty")));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::shape("pool2d", format!("window {window:?} exceeds spatial extent ({h}, {w})")));
    }
    Ok(((h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1))
}

fn window_cells(oy: usize, ox: usize, window: (usize, usize), stride: (usize, usize), w: usize) -> impl Iterator<Item = usize> + Clone {
    let (y0, x0) = (oy * stride.0, ox * stride.1);
    (y0..y0 + window.0).flat_map(move |y| (x0..x0 + window.1).map(move |x| y * w + x))
}

pub fn pool2d_backward(x: &Tensor, kind: PoolKind, window: (usize, usize), stride: (usize, usize), gout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = pool_out(h, w, window, stride)?;
    let mut gx = vec![0.0f32; x.numel()];
    let (xd, g) = (x.data(), gout.data());
    let area = (window.0 * window.1) as f32;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(nc * oh + oy) * ow + ox];
                let cells = window_cells(oy, ox, window, stride, w);
                match kind {
                    PoolKind::Avg => cells.for_each(|i| gx[base + i] += gv / area),
                    PoolKind::Max => {
                        // first maximum in scan order takes the gradient
                        let mut best = None;
                        for i in cells {
                            if best.map_or(true, |b: usize| xd[base + i] > xd[base + b]) {
                                best = Some(i);
                            }
                        }
                        if let Some(b) = best {
                            gx[base + b] += gv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data: gx })
}

/// Pools across the channel axis, giving `[N, 1, H, W]`.
pub fn channel_pool(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; n * hw];
    for ni in 0..n {
        for s in 0..hw {
            let vals = (0..c).map(|ci| xd[(ni * c + ci) * hw + s]);
            out[ni * hw + s] = match kind {
                PoolKind::Avg => vals.sum::<f32>() / c as f32,
                PoolKind::Max => vals.fold(f32::NEG_INFINITY, f32::max),
            };
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

pub fn channel_pool_backward(x: &Tensor, kind: PoolKind, gout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let (xd, g) = (x.data(), gout.data());
    let mut gx = vec![0.0f32; x.numel()];
    for ni in 0..n {
        for s in 0..hw {
            let gv = g[ni * hw + s];
            match kind {
                PoolKind::Avg => (0..c).for_each(|ci| gx[(ni * c + ci) * hw + s] += gv / c as f32),
                PoolKind::Max => {
                    let mut best = 0;
                    for ci in 1..c {
                        if xd[(ni * c + ci) * hw + s] > xd[(ni * c + best) * hw + s] {
                            best = ci;
                        }
                    }
                    gx[(ni * c + best) * hw + s] += gv;
                }
            }
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data: gx })
}

/// Source index pair and interpolation weight for half-pixel ×2 upsampling.
fn half_pixel_source(dst: usize, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f32)
}

/// Bilinear ×2 upsampling with half-pixel centers (align-corners off).
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        let p = &xd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, ly) = half_pixel_source(oy, h);
            for ox in 0..ow {
                let (x0, x1, lx) = half_pixel_source(ox, w);
                out[(nc * oh + oy) * ow + ox] = (1.0 - ly) * ((1.0 - lx) * p[y0 * w + x0] + lx * p[y0 * w + x1])
                    + ly * ((1.0 - lx) * p[y1 * w + x0] + lx * p[y1 * w + x1]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_bilinear2x_backward(x: &Tensor, gout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let g = gout.data();
    let mut gx = vec![0.0f32; x.numel()];
    for nc in 0..n * c {
        let p = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, ly) = half_pixel_source(oy, h);
            for ox in 0..ow {
                let (x0, x1, lx) = half_pixel_source(ox, w);
                let gv = g[(nc * oh + oy) * ow + ox];
                p[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * gv;
                p[y0 * w + x1] += (1.0 - ly) * lx * gv;
                p[y1 * w + x0] += ly * (1.0 - lx) * gv;
                p[y1 * w + x1] += ly * lx * gv;
            }
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data: gx })
}

// ---------------------------------------------------------------------------
// broadcasting elementwise arithmetic

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", format!("rank mismatch between {a:?} and {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", format!("axis {axis}: {x} vs {y} in {a:?} and {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let base_a: usize = (0..rank - 1).map(|d| idx[d] * sa[d]).sum();
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * sb[d]).sum();
        for j in 0..inner {
            f(o + j, base_a + j * ia_step, base_b + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Elementwise `a op b` with size-1 broadcasting on equal-rank shapes.
pub fn binary(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let apply = |x: f32, y: f32| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect();
        return Ok(Tensor { shape: a.shape().to_vec(), data });
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (sa, sb) = (broadcast_strides(a.shape(), &out), broadcast_strides(b.shape(), &out));
    let mut data = vec![0.0f32; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = apply(ad[i], bd[j]));
    Tensor::new(out, data)
}

pub fn binary_backward(a: &Tensor, b: &Tensor, op: BinaryOp, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (sa, sb) = (broadcast_strides(a.shape(), &out), broadcast_strides(b.shape(), &out));
    let mut ga = vec![0.0f32; a.numel()];
    let mut gb = vec![0.0f32; b.numel()];
    let (ad, bd, g) = (a.data(), b.data(), gout.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| match op {
        BinaryOp::Add => {
            ga[i] += g[o];
            gb[j] += g[o];
        }
        BinaryOp::Sub => {
            ga[i] += g[o];
            gb[j] -= g[o];
        }
        BinaryOp::Mul => {
            ga[i] += g[o] * bd[j];
            gb[j] += g[o] * ad[i];
        }
    });
    Ok((Tensor { shape: a.shape().to_vec(), data: ga }, Tensor { shape: b.shape().to_vec(), data: gb }))
}

// ---------------------------------------------------------------------------
// channel bookkeeping, padding, cropping

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", first.shape(), p.shape())));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

/// Channels `start..start+len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c || len == 0 {
        return Err(Error::shape("slice_channels", format!("range {start}..{} outside {c} channels", start + len)));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        data.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::new(vec![n, len, h, w], data)
}

pub(crate) fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= len as i64 { period - m } else { m }) as usize
}

/// Spatial padding by `pad` on every side, mirroring about the edge pixel.
pub fn pad_reflect(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; n * c * ph * pw];
    let xd = x.data();
    for nc in 0..n * c {
        for y in 0..ph {
            let sy = reflect_index(y as i64 - pad as i64, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as i64 - pad as i64, w);
                out[(nc * ph + y) * pw + xx] = xd[(nc * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

pub fn pad_reflect_backward(x_shape: &[usize], pad: usize, gout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = vec![0.0f32; n * c * h * w];
    let g = gout.data();
    for nc in 0..n * c {
        for y in 0..ph {
            let sy = reflect_index(y as i64 - pad as i64, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as i64 - pad as i64, w);
                gx[(nc * h + sy) * w + sx] += g[(nc * ph + y) * pw + xx];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Appends `extra_h` rows and `extra_w` columns replicating the last row/column.
pub fn pad_replicate_end(x: &Tensor, extra_h: usize, extra_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h + extra_h, w + extra_w);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * ph * pw];
    for nc in 0..n * c {
        for y in 0..ph {
            for xx in 0..pw {
                out[(nc * ph + y) * pw + xx] = xd[(nc * h + y.min(h - 1)) * w + xx.min(w - 1)];
            }
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

pub fn pad_replicate_end_backward(x_shape: &[usize], gout: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, ph, pw) = gout.dims4()?;
    let g = gout.data();
    let mut gx = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        for y in 0..ph {
            for xx in 0..pw {
                gx[(nc * h + y.min(h - 1)) * w + xx.min(w - 1)] += g[(nc * ph + y) * pw + xx];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Keeps the top-left `h × w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, xh, xw) = x.dims4()?;
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(Error::shape("crop", format!("cannot crop {xh}x{xw} to {h}x{w}")));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for nc in 0..n * c {
        for y in 0..h {
            let row = (nc * xh + y) * xw;
            data.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

pub fn crop_backward(x_shape: &[usize], gout: &Tensor) -> Result<Tensor> {
    let (n, c, xh, xw) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, h, w) = gout.dims4()?;
    let mut gx = vec![0.0f32; n * c * xh * xw];
    for nc in 0..n * c {
        for y in 0..h {
            let src = &gout.data()[(nc * h + y) * w..(nc * h + y + 1) * w];
            gx[(nc * xh + y) * xw..(nc * xh + y) * xw + w].copy_from_slice(src);
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

// ---------------------------------------------------------------------------
// Haar analysis / synthesis on channel-stacked subbands

/// One-level orthonormal Haar analysis.
///
/// `[N, C, H, W]` becomes `[N, 4C, H/2, W/2]` with channel blocks ordered
/// `ll, lh, hl, hh`. For the 2×2 block `[[a, b], [c, d]]`:
/// `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`, `hh = (a-b-c+d)/2`.
pub fn haar_analysis(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "Haar analysis needs even spatial dims, got {h}x{w}; pad the input to even size first"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let q = hh * hw;
    let xd = x.data();
    let mut out = vec![0.0f32; n * 4 * c * q];
    for ni in 0..n {
        for ci in 0..c {
            let p = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let band = |k: usize| ((ni * 4 + k) * c + ci) * q;
            for i in 0..hh {
                for j in 0..hw {
                    let a = p[2 * i * w + 2 * j];
                    let b = p[2 * i * w + 2 * j + 1];
                    let cc = p[(2 * i + 1) * w + 2 * j];
                    let d = p[(2 * i + 1) * w + 2 * j + 1];
                    let s = i * hw + j;
                    out[band(0) + s] = 0.5 * (a + b + cc + d);
                    out[band(1) + s] = 0.5 * (a + b - cc - d);
                    out[band(2) + s] = 0.5 * (a - b + cc - d);
                    out[band(3) + s] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, hh, hw], out)
}

/// Exact inverse of [`haar_analysis`].
pub fn haar_synthesis(bands: &Tensor) -> Result<Tensor> {
    let (n, c4, hh, hw) = bands.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape("haar_synthesis", format!("stacked subband channels {c4} not divisible by 4")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let q = hh * hw;
    let bd = bands.data();
    let mut out = vec![0.0f32; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let band = |k: usize| ((ni * 4 + k) * c + ci) * q;
            let p = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for i in 0..hh {
                for j in 0..hw {
                    let s = i * hw + j;
                    let (ll, lh, hl, hhv) = (bd[band(0) + s], bd[band(1) + s], bd[band(2) + s], bd[band(3) + s]);
                    p[2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hhv);
                    p[2 * i * w + 2 * j + 1] = 0.5 * (ll + lh - hl - hhv);
                    p[(2 * i + 1) * w + 2 * j] = 0.5 * (ll - lh + hl - hhv);
                    p[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hhv);
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

// ---------------------------------------------------------------------------
// fully connected

/// `x [M, F] · wᵀ + b` with `w [O, F]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (m, f, o) = check_linear(x, w, b)?;
    let mut out = vec![0.0f32; m * o];
    if let Some(b) = b {
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    sgemm(m, f, o, x.data(), false, w.data(), true, &mut out, if b.is_some() { 1.0 } else { 0.0 });
    Tensor::new(vec![m, o], out)
}

fn check_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (&[m, f], &[o, wf]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("linear", format!("expected x [M,F] and w [O,F], got {:?} and {:?}", x.shape(), w.shape())));
    };
    if f != wf {
        return Err(Error::shape("linear", format!("input features {f} != weight features {wf}")));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape("linear", format!("bias {:?} != [{o}]", b.shape())));
        }
    }
    Ok((m, f, o))
}

pub fn linear_backward(x: &Tensor, w: &Tensor, with_bias: bool, gout: &Tensor) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (m, f, o) = check_linear(x, w, None)?;
    let mut gx = vec![0.0f32; m * f];
    let mut gw = vec![0.0f32; o * f];
    sgemm(m, o, f, gout.data(), false, w.data(), false, &mut gx, 0.0);
    sgemm(o, m, f, gout.data(), true, x.data(), false, &mut gw, 0.0);
    let gb = with_bias.then(|| {
        let mut gb = vec![0.0f32; o];
        for row in gout.data().chunks(o) {
            for (a, g) in gb.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor { shape: vec![o], data: gb }
    });
    Ok((Tensor { shape: vec![m, f], data: gx }, Tensor { shape: vec![o, f], data: gw }, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Textbook nested-loop convolution, computed in f64.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (oh, ow) = s.output_hw(h, wd).unwrap();
        let cin_g = c / s.groups;
        let cout_g = s.out_channels / s.groups;
        Tensor::from_fn(&[n, s.out_channels, oh, ow], |idx| {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let o = (idx / (ow * oh)) % s.out_channels;
            let ni = idx / (ow * oh * s.out_channels);
            let g = o / cout_g;
            let mut acc = b.map_or(0.0, |b| f64::from(b.data()[o]));
            for cl in 0..cin_g {
                for ki in 0..s.kernel.0 {
                    for kj in 0..s.kernel.1 {
                        let iy = (oy * s.stride.0 + ki * s.dilation.0) as i64 - s.padding.0 as i64;
                        let ix = (ox * s.stride.1 + kj * s.dilation.1) as i64 - s.padding.1 as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                            continue;
                        }
                        let xv = x.at(&[ni, g * cin_g + cl, iy as usize, ix as usize]);
                        acc += f64::from(xv) * f64::from(w.at(&[o, cl, ki, kj]));
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, &ConvSpec::new(1, 1, 3).padding(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, None, &ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn dilated_depthwise_matches_loop_oracle() {
        let mut r = rng();
        let x = Tensor::uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut r);
        let spec = ConvSpec::depthwise(2, 3, 3);
        assert_eq!(spec.padding, (3, 3));
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
        assert!(y.max_abs_diff(&conv_oracle(&x, &w, None, &spec)) < 1e-5);
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::new(2, 4, 3)).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let err = conv2d(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), None, &ConvSpec::new(1, 1, 3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("non-positive"), "{err}");
        assert!(ConvSpec::new(3, 4, 3).groups(2).validate().is_err());
    }

    #[test]
    fn hardswish_reference_points() {
        let y = hardswish(&Tensor::new(vec![4], vec![0.0, 3.0, -3.0, 1.0]).unwrap());
        assert_eq!(&y.data()[..3], &[0.0, 3.0, 0.0]);
        assert!((y.data()[3] - 4.0 / 6.0).abs() < 1e-7);
    }

    #[test]
    fn activation_reference_points() {
        assert_eq!(activation(&Tensor::scalar(0.0), Activation::Sigmoid).data(), &[0.5]);
        let y = activation(&Tensor::scalar(-2.0), Activation::LeakyRelu(0.1));
        assert!((y.data()[0] + 0.2).abs() < 1e-7);
        let y = activation(&Tensor::new(vec![2, 2], vec![-1.0, 2.0, 0.5, -0.3]).unwrap(), Activation::Relu);
        assert_eq!(y.data(), &[0.0, 2.0, 0.5, 0.0]);
        assert!(Activation::parse("gelu").is_err());
        assert!(Activation::parse("leaky_relu:1.5").is_err());
        assert_eq!(Activation::parse("leaky_relu:0.1").unwrap(), Activation::LeakyRelu(0.1));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let x = Tensor::full(&[1, 2, 2, 2], 3.5);
        assert!(layer_norm(&x, &ones, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        // mean 2, biased variance 1 -> (x - 2) / sqrt(1 + 1e-5)
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((f64::from(y.data()[0]) + expect).abs() < 1e-6);
        assert!((f64::from(y.data()[1]) - expect).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);

        let y = layer_norm(&Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng()), &zeros, &Tensor::full(&[2], 7.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let (g1, b0) = (Tensor::ones(&[2]), Tensor::zeros(&[2]));
        let x = Tensor::uniform(&[3, 2, 2, 2], -2.0, 5.0, &mut rng());
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm(&x, &g1, &b0, &mut stats, NormMode::Train).unwrap();
        for c in 0..2 {
            let mean: f32 = (0..3).flat_map(|n| (0..4).map(move |s| (n, s))).map(|(n, s)| y.data()[(n * 2 + c) * 4 + s]).sum::<f32>() / 12.0;
            assert!(mean.abs() < 1e-5);
        }
        assert!(stats.mean.iter().all(|&m| m != 0.0));

        let mut stats = RunningStats { mean: vec![2.0], var: vec![4.0], momentum: 0.1, initialized: true };
        let (y, _) = batch_norm(&Tensor::full(&[1, 1, 1, 1], 4.0), &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, NormMode::Eval).unwrap();
        let expect = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!((f64::from(y.data()[0]) - expect).abs() < 1e-6);
        assert!((y.data()[0] - 1.0).abs() < 1e-5);

        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm(&Tensor::full(&[1, 1, 1, 1], 4.0), &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, NormMode::Train).unwrap();
        assert!(y.is_finite());

        let mut fresh = RunningStats::uninitialized(1);
        assert!(batch_norm(&Tensor::zeros(&[1, 1, 1, 1]), &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut fresh, NormMode::Eval).is_err());
    }

    #[test]
    fn pooling_cases() {
        let y = pool2d(&Tensor::full(&[1, 2, 3, 5], 4.25), PoolKind::Avg, (3, 5), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 4.25));

        let x = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 5.0, 2.0]).unwrap();
        assert_eq!(channel_pool(&x, PoolKind::Max).unwrap().data(), &[5.0]);

        let ramp = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let y = pool2d(&ramp, PoolKind::Avg, (2, 2), (2, 2)).unwrap();
        // windows {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(pool2d(&ramp, PoolKind::Avg, (0, 2), (1, 1)).is_err());
    }

    #[test]
    fn upsample_cases() {
        let y = upsample_bilinear2x(&Tensor::full(&[1, 1, 3, 2], 1.5)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 4]);
        assert!(y.data().iter().all(|&v| v == 1.5));
        let y = upsample_bilinear2x(&Tensor::full(&[1, 1, 1, 1], -2.0)).unwrap();
        assert_eq!(y.data(), &[-2.0; 4]);

        // half-pixel sources for 2 -> 4: {0, 0.25, 0.75, 1} after clamping at 0
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear2x(&x).unwrap();
        let src = [0.0f64, 0.25, 0.75, 1.0];
        let lerp = |t: f64, a: f64, b: f64| a + t * (b - a);
        for oy in 0..4 {
            for ox in 0..4 {
                let top = lerp(src[ox], 0.0, 1.0);
                let bottom = lerp(src[ox], 2.0, 3.0);
                let want = lerp(src[oy], top, bottom);
                assert!((f64::from(y.at(&[0, 0, oy, ox])) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let b = Tensor::new(vec![1, 2, 1, 1], vec![10.0, 20.0]).unwrap();
        let y = binary(&a, &b, BinaryOp::Add).unwrap();
        assert_eq!(y.data(), &[10.0, 11.0, 12.0, 13.0, 24.0, 25.0, 26.0, 27.0]);
        assert!(binary(&a, &Tensor::zeros(&[1, 3, 1, 1]), BinaryOp::Mul).is_err());
        let (ga, gb) = binary_backward(&a, &b, BinaryOp::Mul, &Tensor::ones(&[1, 2, 2, 2])).unwrap();
        assert_eq!(ga.data(), &[10.0, 10.0, 10.0, 10.0, 20.0, 20.0, 20.0, 20.0]);
        assert_eq!(gb.data(), &[6.0, 22.0]);
    }

    #[test]
    fn reflect_index_folds_repeatedly() {
        let got: Vec<usize> = (-4..7).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn linear_matches_naive() {
        let mut r = rng();
        let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                let want: f32 = (0..5).map(|f| x.at(&[i, f]) * w.at(&[o, f])).sum::<f32>() + b.data()[o];
                assert!((y.at(&[i, o]) - want).abs() < 1e-5);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, ConvSpec)> {
            (1usize..=2, 1usize..=3, 1usize..=3, 3usize..=8, 3usize..=8, 1usize..=3, 1usize..=2, 0usize..=2, 1usize..=2, any::<bool>(), any::<u64>())
                .prop_map(|(n, cg, og, h, w, k, s, p, d, depthwise, seed)| {
                    let groups = if depthwise { cg } else { 1 };
                    let (cin, cout) = if depthwise { (cg, cg) } else { (cg, og) };
                    let spec = ConvSpec {
                        in_channels: cin,
                        out_channels: cout,
                        kernel: (k, k),
                        stride: (s, s),
                        padding: (p, p),
                        dilation: (d, d),
                        groups,
                    };
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let x = Tensor::uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
                    let wt = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
                    let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut r);
                    (x, wt, b, spec)
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn conv_matches_nested_loop_oracle((x, w, b, spec) in conv_case()) {
                let (_, _, h, wd) = x.dims4().unwrap();
                prop_assume!(spec.output_hw(h, wd).is_ok());
                let got = conv2d(&x, &w, Some(&b), &spec).unwrap();
                let want = conv_oracle(&x, &w, Some(&b), &spec);
                prop_assert!(got.max_abs_diff(&want) < 1e-4);
            }

            #[test]
            fn grouped_conv_is_per_channel_conv(seed in any::<u64>(), c in 1usize..=4) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::uniform(&[1, c, 6, 5], -1.0, 1.0, &mut r);
                let spec = ConvSpec::depthwise(c, 3, 2);
                let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
                let whole = conv2d(&x, &w, None, &spec).unwrap();
                let parts: Vec<Tensor> = (0..c).map(|ci| {
                    let xi = slice_channels(&x, ci, 1).unwrap();
                    let wi = Tensor::new(vec![1, 1, 3, 3], w.data()[ci * 9..(ci + 1) * 9].to_vec()).unwrap();
                    conv2d(&xi, &wi, None, &ConvSpec { groups: 1, in_channels: 1, out_channels: 1, ..spec }).unwrap()
                }).collect();
                let refs: Vec<&Tensor> = parts.iter().collect();
                prop_assert!(whole.max_abs_diff(&concat_channels(&refs).unwrap()) < 1e-5);
            }

            #[test]
            fn conv_is_deterministic((x, w, b, spec) in conv_case()) {
                let (_, _, h, wd) = x.dims4().unwrap();
                prop_assume!(spec.output_hw(h, wd).is_ok());
                let a = conv2d(&x, &w, Some(&b), &spec).unwrap();
                let b2 = conv2d(&x, &w, Some(&b), &spec).unwrap();
                prop_assert!(a.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }
}
