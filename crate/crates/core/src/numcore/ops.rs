//! Forward and backward kernels for the tape primitives.
//!
//! All kernels are deterministic: loop orders are fixed, and the rayon
//! parallelism used by the convolution/pooling kernels partitions output
//! planes so every element is produced by exactly one fixed reduction
//! sequence. Results are bit-identical for any thread count.

use rayon::prelude::*;

use super::tensor::{ClassMask, Dims, Tensor};
use super::{NumError, Result, Scalar};

/// Valid output index range [lo, hi) such that `o * stride + k_off - pad`
/// stays inside `[0, in_len)`.
#[inline]
fn out_range(stride: usize, pad: usize, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let num = pad as isize - k_off as isize;
    let lo = if num <= 0 { 0 } else { ((num + s - 1) / s) as usize };
    let hi_num = in_len as isize - 1 + pad as isize - k_off as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_out_dims(x: Dims, w: Dims, stride: usize, pad: usize) -> Result<Dims> {
    if stride < 1 {
        return Err(NumError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    if w.c != x.c {
        return Err(NumError::Shape {
            op: "conv2d",
            detail: format!("kernel expects {} input channels, tensor has {}", w.c, x.c),
        });
    }
    let h_eff = x.h + 2 * pad;
    let w_eff = x.w + 2 * pad;
    if w.h > h_eff || w.w > w_eff {
        return Err(NumError::Shape {
            op: "conv2d",
            detail: format!("kernel {}x{} larger than padded input {}x{}", w.h, w.w, h_eff, w_eff),
        });
    }
    let oh = (h_eff - w.h) / stride + 1;
    let ow = (w_eff - w.w) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(NumError::Shape {
            op: "conv2d",
            detail: format!("output dims {}x{} not positive", oh, ow),
        });
    }
    Ok(Dims::new(x.n, w.n, oh, ow))
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xd = x.dims();
    let wd = w.dims();
    let od = conv2d_out_dims(xd, wd, stride, pad)?;
    if b.dims().len() != wd.n {
        return Err(NumError::Shape {
            op: "conv2d",
            detail: format!("bias has {} values, kernel has {} output channels", b.dims().len(), wd.n),
        });
    }
    x.check_finite("conv2d input")?;
    w.check_finite("conv2d weight")?;
    b.check_finite("conv2d bias")?;

    let (cin, kh, kw) = (wd.c, wd.h, wd.w);
    let (h, w_in) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);
    let plane = oh * ow;
    let x_data = x.data();
    let w_data = w.data();
    let b_data = b.data();

    let mut out = Tensor::zeros(od);
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(p, out_plane)| {
        let n = p / od.c;
        let co = p % od.c;
        let bias = b_data[co];
        for v in out_plane.iter_mut() {
            *v = bias;
        }
        for ci in 0..cin {
            let x_plane = &x_data[(n * cin + ci) * h * w_in..(n * cin + ci + 1) * h * w_in];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = out_range(stride, pad, ky, h, oh);
                for kx in 0..kw {
                    let wv = w_data[((co * cin + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = out_range(stride, pad, kx, w_in, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let x_row = &x_plane[iy * w_in..iy * w_in + w_in];
                        let out_row = &mut out_plane[oy * ow..oy * ow + ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            for (o, xv) in
                                out_row[ox_lo..ox_hi].iter_mut().zip(&x_row[ix0..ix0 + len])
                            {
                                *o += wv * *xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Accumulate the input gradient of conv2d into `dx`.
pub fn conv2d_backward_x<T: Scalar>(
    dx: &mut [T],
    xd: Dims,
    w_data: &[T],
    wd: Dims,
    gout: &[T],
    od: Dims,
    stride: usize,
    pad: usize,
) {
    let (cin, kh, kw) = (wd.c, wd.h, wd.w);
    let (h, w_in) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);
    let plane = h * w_in;

    dx.par_chunks_mut(plane).enumerate().for_each(|(p, dx_plane)| {
        let n = p / cin;
        let ci = p % cin;
        for co in 0..od.c {
            let g_plane = &gout[(n * od.c + co) * oh * ow..(n * od.c + co + 1) * oh * ow];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = out_range(stride, pad, ky, h, oh);
                for kx in 0..kw {
                    let wv = w_data[((co * cin + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = out_range(stride, pad, kx, w_in, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let g_row = &g_plane[oy * ow..oy * ow + ow];
                        let dx_row = &mut dx_plane[iy * w_in..iy * w_in + w_in];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            for (d, gv) in
                                dx_row[ix0..ix0 + len].iter_mut().zip(&g_row[ox_lo..ox_hi])
                            {
                                *d += wv * *gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dx_row[ox * stride + kx - pad] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulate the weight gradient of conv2d into `dw`.
pub fn conv2d_backward_w<T: Scalar>(
    dw: &mut [T],
    wd: Dims,
    x_data: &[T],
    xd: Dims,
    gout: &[T],
    od: Dims,
    stride: usize,
    pad: usize,
) {
    let (cin, kh, kw) = (wd.c, wd.h, wd.w);
    let (h, w_in) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);

    dw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, dw_slice)| {
        for ci in 0..cin {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = out_range(stride, pad, ky, h, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = out_range(stride, pad, kx, w_in, ow);
                    let mut acc = T::zero();
                    if ox_lo < ox_hi {
                        for n in 0..xd.n {
                            let x_plane =
                                &x_data[(n * cin + ci) * h * w_in..(n * cin + ci + 1) * h * w_in];
                            let g_plane =
                                &gout[(n * od.c + co) * oh * ow..(n * od.c + co + 1) * oh * ow];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let x_row = &x_plane[iy * w_in..iy * w_in + w_in];
                                let g_row = &g_plane[oy * ow..oy * ow + ow];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let len = ox_hi - ox_lo;
                                    for (xv, gv) in
                                        x_row[ix0..ix0 + len].iter().zip(&g_row[ox_lo..ox_hi])
                                    {
                                        acc += *xv * *gv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += x_row[ox * stride + kx - pad] * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                    dw_slice[(ci * kh + ky) * kw + kx] += acc;
                }
            }
        }
    });
}

/// Accumulate the bias gradient of conv2d into `db`.
pub fn conv2d_backward_b<T: Scalar>(db: &mut [T], gout: &[T], od: Dims) {
    let plane = od.h * od.w;
    for n in 0..od.n {
        for co in 0..od.c {
            let start = (n * od.c + co) * plane;
            let mut acc = T::zero();
            for v in &gout[start..start + plane] {
                acc += *v;
            }
            db[co] += acc;
        }
    }
}

/// Windowed maximum. Returns the output and, per output element, the flat
/// input index of the maximum (first occurrence in row-major order on ties).
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let xd = x.dims();
    if k < 1 || stride < 1 {
        return Err(NumError::InvalidArg { op: "max_pool", detail: "k and stride must be >= 1".into() });
    }
    if k > xd.h || k > xd.w {
        return Err(NumError::Shape {
            op: "max_pool",
            detail: format!("window {} larger than input {}x{}", k, xd.h, xd.w),
        });
    }
    let oh = (xd.h - k) / stride + 1;
    let ow = (xd.w - k) / stride + 1;
    let od = Dims::new(xd.n, xd.c, oh, ow);
    let plane_in = xd.h * xd.w;
    let plane_out = oh * ow;
    let x_data = x.data();

    let mut out = Tensor::zeros(od);
    let mut argmax = vec![0u32; od.len()];
    out.data_mut()
        .par_chunks_mut(plane_out)
        .zip(argmax.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(p, (out_plane, arg_plane))| {
            let base = p * plane_in;
            let x_plane = &x_data[base..base + plane_in];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = x_plane[y0 * xd.w + x0];
                    let mut best_idx = y0 * xd.w + x0;
                    for wy in 0..k {
                        for wx in 0..k {
                            let i = (y0 + wy) * xd.w + x0 + wx;
                            if x_plane[i] > best {
                                best = x_plane[i];
                                best_idx = i;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    arg_plane[oy * ow + ox] = (base + best_idx) as u32;
                }
            }
        });
    Ok((out, argmax))
}

/// Route the pooled gradient back to the recorded argmax positions.
pub fn max_pool_backward<T: Scalar>(dx: &mut [T], argmax: &[u32], gout: &[T]) {
    for (g, &i) in gout.iter().zip(argmax) {
        dx[i as usize] += *g;
    }
}

/// Per-axis source index/weight table for align-corners-false bilinear
/// interpolation.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let xd = x.dims();
    if out_h == 0 || out_w == 0 {
        return Err(NumError::InvalidArg { op: "bilinear_upsample", detail: "zero-size target".into() });
    }
    if out_h < xd.h || out_w < xd.w {
        return Err(NumError::InvalidArg {
            op: "bilinear_upsample",
            detail: format!("target {}x{} smaller than input {}x{}", out_h, out_w, xd.h, xd.w),
        });
    }
    let ys = bilinear_axis(xd.h, out_h);
    let xs = bilinear_axis(xd.w, out_w);
    let od = Dims::new(xd.n, xd.c, out_h, out_w);
    let plane_in = xd.h * xd.w;
    let plane_out = out_h * out_w;
    let x_data = x.data();

    let mut out = Tensor::zeros(od);
    out.data_mut().par_chunks_mut(plane_out).enumerate().for_each(|(p, out_plane)| {
        let x_plane = &x_data[p * plane_in..(p + 1) * plane_in];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let wy1 = T::from_f64_lossy(fy);
            let wy0 = T::one() - wy1;
            let row0 = &x_plane[y0 * xd.w..y0 * xd.w + xd.w];
            let row1 = &x_plane[y1 * xd.w..y1 * xd.w + xd.w];
            let out_row = &mut out_plane[oy * out_w..oy * out_w + out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let wx1 = T::from_f64_lossy(fx);
                let wx0 = T::one() - wx1;
                out_row[ox] = wy0 * (wx0 * row0[x0] + wx1 * row0[x1])
                    + wy1 * (wx0 * row1[x0] + wx1 * row1[x1]);
            }
        }
    });
    Ok(out)
}

pub fn upsample_backward<T: Scalar>(dx: &mut [T], xd: Dims, gout: &[T], od: Dims) {
    let ys = bilinear_axis(xd.h, od.h);
    let xs = bilinear_axis(xd.w, od.w);
    let plane_in = xd.h * xd.w;
    let plane_out = od.h * od.w;

    dx.par_chunks_mut(plane_in).enumerate().for_each(|(p, dx_plane)| {
        let g_plane = &gout[p * plane_out..(p + 1) * plane_out];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let wy1 = T::from_f64_lossy(fy);
            let wy0 = T::one() - wy1;
            let g_row = &g_plane[oy * od.w..oy * od.w + od.w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let wx1 = T::from_f64_lossy(fx);
                let wx0 = T::one() - wx1;
                let g = g_row[ox];
                dx_plane[y0 * xd.w + x0] += wy0 * wx0 * g;
                dx_plane[y0 * xd.w + x1] += wy0 * wx1 * g;
                dx_plane[y1 * xd.w + x0] += wy1 * wx0 * g;
                dx_plane[y1 * xd.w + x1] += wy1 * wx1 * g;
            }
        }
    });
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

pub fn relu_backward<T: Scalar>(dx: &mut [T], x_data: &[T], gout: &[T]) {
    for ((d, xv), g) in dx.iter_mut().zip(x_data).zip(gout) {
        if *xv > T::zero() {
            *d += *g;
        }
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    out
}

pub fn sigmoid_backward<T: Scalar>(dx: &mut [T], out_data: &[T], gout: &[T]) {
    for ((d, ov), g) in dx.iter_mut().zip(out_data).zip(gout) {
        *d += *g * *ov * (T::one() - *ov);
    }
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xd = x.dims();
    let plane = xd.h * xd.w;
    let inv = T::from_f64_lossy(1.0 / plane as f64);
    let mut out = Tensor::zeros(Dims::new(xd.n, xd.c, 1, 1));
    for (o, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(plane)) {
        let mut acc = T::zero();
        for v in chunk {
            acc += *v;
        }
        *o = acc * inv;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dx: &mut [T], xd: Dims, gout: &[T]) {
    let plane = xd.h * xd.w;
    let inv = T::from_f64_lossy(1.0 / plane as f64);
    for (chunk, g) in dx.chunks_mut(plane).zip(gout) {
        let gv = *g * inv;
        for d in chunk {
            *d += gv;
        }
    }
}

fn validate_targets(targets: &[ClassMask], d: Dims, ignore: Option<u16>) -> Result<()> {
    if targets.len() != d.n {
        return Err(NumError::Shape {
            op: "softmax_cross_entropy",
            detail: format!("{} target masks for batch of {}", targets.len(), d.n),
        });
    }
    for m in targets {
        if m.height() != d.h || m.width() != d.w {
            return Err(NumError::Shape {
                op: "softmax_cross_entropy",
                detail: format!(
                    "target mask {}x{} does not match logits {}x{}",
                    m.height(),
                    m.width(),
                    d.h,
                    d.w
                ),
            });
        }
        for &cls in m.data() {
            if Some(cls) == ignore {
                continue;
            }
            if (cls as usize) >= d.c {
                return Err(NumError::BadTarget { class: cls, num_classes: d.c });
            }
        }
    }
    Ok(())
}

/// Mean over non-ignored pixels of -log softmax at the target class.
/// Returns the loss and the number of counted pixels.
pub fn softmax_ce_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[ClassMask],
    ignore: Option<u16>,
) -> Result<(T, usize)> {
    let d = logits.dims();
    validate_targets(targets, d, ignore)?;
    logits.check_finite("softmax_cross_entropy logits")?;
    let plane = d.h * d.w;
    let data = logits.data();
    let mut total = T::zero();
    let mut count = 0usize;
    for (n, mask) in targets.iter().enumerate() {
        for y in 0..d.h {
            for x in 0..d.w {
                let cls = mask.at(y, x);
                if Some(cls) == ignore {
                    continue;
                }
                let px = y * d.w + x;
                let mut m = data[n * d.c * plane + px];
                for k in 1..d.c {
                    let v = data[(n * d.c + k) * plane + px];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = T::zero();
                for k in 0..d.c {
                    sum += (data[(n * d.c + k) * plane + px] - m).exp();
                }
                let lse = m + sum.ln();
                total += lse - data[(n * d.c + cls as usize) * plane + px];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(NumError::InvalidArg {
            op: "softmax_cross_entropy",
            detail: "no labeled pixels (all targets ignored)".into(),
        });
    }
    Ok((total / T::from_f64_lossy(count as f64), count))
}

/// dlogits += g * (softmax - onehot) / count for every counted pixel.
pub fn softmax_ce_backward<T: Scalar>(
    dx: &mut [T],
    x_data: &[T],
    d: Dims,
    targets: &[ClassMask],
    ignore: Option<u16>,
    count: usize,
    g: T,
) {
    let plane = d.h * d.w;
    let scale = g / T::from_f64_lossy(count as f64);
    let mut probs = vec![T::zero(); d.c];
    for (n, mask) in targets.iter().enumerate() {
        for y in 0..d.h {
            for x in 0..d.w {
                let cls = mask.at(y, x);
                if Some(cls) == ignore {
                    continue;
                }
                let px = y * d.w + x;
                let mut m = x_data[n * d.c * plane + px];
                for k in 1..d.c {
                    let v = x_data[(n * d.c + k) * plane + px];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = T::zero();
                for (k, p) in probs.iter_mut().enumerate() {
                    let e = (x_data[(n * d.c + k) * plane + px] - m).exp();
                    *p = e;
                    sum += e;
                }
                for (k, p) in probs.iter().enumerate() {
                    let mut v = *p / sum;
                    if k == cls as usize {
                        v = v - T::one();
                    }
                    dx[(n * d.c + k) * plane + px] += scale * v;
                }
            }
        }
    }
}

/// Numerically stable binary cross-entropy on logits, mean over all slots.
pub fn bce_logits_forward<T: Scalar>(logits: &Tensor<T>, targets: &[bool]) -> Result<T> {
    let d = logits.dims();
    if targets.len() != d.len() {
        return Err(NumError::Shape {
            op: "bce_with_logits",
            detail: format!("{} targets for {} logits", targets.len(), d.len()),
        });
    }
    logits.check_finite("bce logits")?;
    let mut total = T::zero();
    for (&z, &t) in logits.data().iter().zip(targets) {
        let tz = if t { z } else { T::zero() };
        total += z.max(T::zero()) - tz + (T::one() + (-z.abs()).exp()).ln();
    }
    Ok(total / T::from_f64_lossy(d.len() as f64))
}

pub fn bce_logits_backward<T: Scalar>(dx: &mut [T], z_data: &[T], targets: &[bool], g: T) {
    let inv = g / T::from_f64_lossy(z_data.len() as f64);
    for ((d, &z), &t) in dx.iter_mut().zip(z_data).zip(targets) {
        let sig = T::one() / (T::one() + (-z).exp());
        let tv = if t { T::one() } else { T::zero() };
        *d += inv * (sig - tv);
    }
}

/// Channel-flattened attention statistic: out[n, 0, y, x] = mean_c |x|^p.
pub fn channel_abs_pow_mean_forward<T: Scalar>(x: &Tensor<T>, p: T) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.c == 0 {
        return Err(NumError::InvalidArg { op: "attention_mean", detail: "empty channel axis".into() });
    }
    if p < T::one() {
        return Err(NumError::InvalidArg { op: "attention_mean", detail: format!("p = {} must be >= 1", p) });
    }
    let plane = d.h * d.w;
    let inv_c = T::from_f64_lossy(1.0 / d.c as f64);
    let data = x.data();
    let mut out = Tensor::zeros(Dims::new(d.n, 1, d.h, d.w));
    let p_is_one = p == T::one();
    let p_is_two = p == T::from_f64_lossy(2.0);
    for n in 0..d.n {
        let out_plane = &mut out.data_mut()[n * plane..(n + 1) * plane];
        for c in 0..d.c {
            let x_plane = &data[(n * d.c + c) * plane..(n * d.c + c + 1) * plane];
            if p_is_one {
                for (o, v) in out_plane.iter_mut().zip(x_plane) {
                    *o += v.abs();
                }
            } else if p_is_two {
                for (o, v) in out_plane.iter_mut().zip(x_plane) {
                    *o += *v * *v;
                }
            } else {
                for (o, v) in out_plane.iter_mut().zip(x_plane) {
                    *o += v.abs().powf(p);
                }
            }
        }
        for o in out_plane.iter_mut() {
            *o *= inv_c;
        }
    }
    Ok(out)
}

/// dx += g_out * (p / C) * |x|^(p-1) * sign(x); subgradient 0 at x == 0.
pub fn channel_abs_pow_mean_backward<T: Scalar>(dx: &mut [T], x_data: &[T], d: Dims, p: T, gout: &[T]) {
    let plane = d.h * d.w;
    let scale = p / T::from_f64_lossy(d.c as f64);
    let p_is_one = p == T::one();
    for n in 0..d.n {
        let g_plane = &gout[n * plane..(n + 1) * plane];
        for c in 0..d.c {
            let base = (n * d.c + c) * plane;
            let x_plane = &x_data[base..base + plane];
            let dx_plane = &mut dx[base..base + plane];
            for ((dv, &xv), &g) in dx_plane.iter_mut().zip(x_plane).zip(g_plane) {
                if xv == T::zero() {
                    continue;
                }
                let sign = if xv > T::zero() { T::one() } else { -T::one() };
                let mag = if p_is_one { T::one() } else { xv.abs().powf(p - T::one()) };
                *dv += g * scale * mag * sign;
            }
        }
    }
}

/// Normalize each batch sample (its whole C*H*W slice) by its L2 norm.
/// A zero slice maps to zero and receives no gradient.
pub fn l2_normalize_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.dims();
    let slice = d.c * d.h * d.w;
    let mut out = x.clone();
    out.clear_grad();
    let mut norms = Vec::with_capacity(d.n);
    for chunk in out.data_mut().chunks_mut(slice) {
        let mut sq = T::zero();
        for v in chunk.iter() {
            sq += *v * *v;
        }
        let norm = sq.sqrt();
        norms.push(norm);
        if norm > T::zero() {
            let inv = T::one() / norm;
            for v in chunk {
                *v *= inv;
            }
        }
    }
    (out, norms)
}

pub fn l2_normalize_backward<T: Scalar>(
    dx: &mut [T],
    out_data: &[T],
    d: Dims,
    norms: &[T],
    gout: &[T],
) {
    let slice = d.c * d.h * d.w;
    for ((dx_chunk, (o_chunk, g_chunk)), &norm) in dx
        .chunks_mut(slice)
        .zip(out_data.chunks(slice).zip(gout.chunks(slice)))
        .zip(norms)
    {
        if norm <= T::zero() {
            continue;
        }
        let mut dot = T::zero();
        for (g, o) in g_chunk.iter().zip(o_chunk) {
            dot += *g * *o;
        }
        let inv = T::one() / norm;
        for ((d, g), o) in dx_chunk.iter_mut().zip(g_chunk).zip(o_chunk) {
            *d += (*g - *o * dot) * inv;
        }
    }
}

/// Mean squared difference against a constant target.
pub fn mse_to_forward<T: Scalar>(x: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if x.dims() != target.dims() {
        return Err(NumError::Shape {
            op: "mse",
            detail: format!("dims {} vs {}", x.dims(), target.dims()),
        });
    }
    let inv = T::from_f64_lossy(1.0 / x.dims().len() as f64);
    let mut acc = T::zero();
    for (a, b) in x.data().iter().zip(target.data()) {
        let d = *a - *b;
        acc += d * d;
    }
    Ok(acc * inv)
}

pub fn mse_to_backward<T: Scalar>(dx: &mut [T], x_data: &[T], target_data: &[T], g: T) {
    let scale = T::from_f64_lossy(2.0 / x_data.len() as f64) * g;
    for ((d, a), b) in dx.iter_mut().zip(x_data).zip(target_data) {
        *d += scale * (*a - *b);
    }
}

/// Log-softmax over the channel axis at one pixel, written into `out`.
fn pixel_log_softmax<T: Scalar>(data: &[T], n: usize, px: usize, c: usize, plane: usize, out: &mut [T]) {
    let mut m = data[n * c * plane + px];
    for k in 1..c {
        let v = data[(n * c + k) * plane + px];
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for (k, o) in out.iter_mut().enumerate() {
        let v = data[(n * c + k) * plane + px] - m;
        *o = v;
        sum += v.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o = *o - lse;
    }
}

/// Symmetric per-pixel KL divergence between the softmax distributions of
/// `x` and the constant `other`, averaged over pixels.
pub fn sym_kl_forward<T: Scalar>(x: &Tensor<T>, other: &Tensor<T>) -> Result<T> {
    let d = x.dims();
    if d != other.dims() {
        return Err(NumError::Shape {
            op: "sym_kl",
            detail: format!("dims {} vs {}", d, other.dims()),
        });
    }
    let plane = d.h * d.w;
    let mut lp = vec![T::zero(); d.c];
    let mut lq = vec![T::zero(); d.c];
    let mut total = T::zero();
    for n in 0..d.n {
        for px in 0..plane {
            pixel_log_softmax(x.data(), n, px, d.c, plane, &mut lp);
            pixel_log_softmax(other.data(), n, px, d.c, plane, &mut lq);
            for k in 0..d.c {
                let p = lp[k].exp();
                let q = lq[k].exp();
                total += p * (lp[k] - lq[k]) + q * (lq[k] - lp[k]);
            }
        }
    }
    Ok(total / T::from_f64_lossy((d.n * plane) as f64))
}

pub fn sym_kl_backward<T: Scalar>(dx: &mut [T], x_data: &[T], d: Dims, other_data: &[T], g: T) {
    let plane = d.h * d.w;
    let scale = g / T::from_f64_lossy((d.n * plane) as f64);
    let mut lp = vec![T::zero(); d.c];
    let mut lq = vec![T::zero(); d.c];
    for n in 0..d.n {
        for px in 0..plane {
            pixel_log_softmax(x_data, n, px, d.c, plane, &mut lp);
            pixel_log_softmax(other_data, n, px, d.c, plane, &mut lq);
            let mut kl_pq = T::zero();
            for k in 0..d.c {
                kl_pq += lp[k].exp() * (lp[k] - lq[k]);
            }
            for k in 0..d.c {
                let p = lp[k].exp();
                let q = lq[k].exp();
                let dv = p * ((lp[k] - lq[k]) - kl_pq) + (p - q);
                dx[(n * d.c + k) * plane + px] += scale * dv;
            }
        }
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let d = logits.dims();
    let plane = d.h * d.w;
    let mut out = Tensor::zeros(d);
    let data = logits.data();
    for n in 0..d.n {
        for px in 0..plane {
            let mut m = data[n * d.c * plane + px];
            for k in 1..d.c {
                let v = data[(n * d.c + k) * plane + px];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for k in 0..d.c {
                let e = (data[(n * d.c + k) * plane + px] - m).exp();
                out.data_mut()[(n * d.c + k) * plane + px] = e;
                sum += e;
            }
            for k in 0..d.c {
                let i = (n * d.c + k) * plane + px;
                let v = out.data_mut()[i] / sum;
                out.data_mut()[i] = v;
            }
        }
    }
    out
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for v in x.data() {
        acc += *v;
    }
    acc
}

pub fn sum_sq_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for v in x.data() {
        acc += *v * *v;
    }
    acc
}
