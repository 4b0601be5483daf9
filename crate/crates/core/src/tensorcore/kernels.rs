//! Slice-level forward and backward kernels behind the graph ops.
//!
//! Every kernel writes each output element from exactly one task in a fixed
//! loop order, so results do not depend on the rayon schedule.

use rayon::prelude::*;

use crate::scalar::{stable_sigmoid, Scalar};

/// Output length and leading pad for "same-ceil" padding: `out = ceil(len / stride)`.
pub fn same_ceil(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

/// Convolution geometry, `B, C, H, W` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (oh, pad_top) = same_ceil(h, kh, stride);
        let (ow, pad_left) = same_ceil(w, kw, stride);
        Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        }
    }

    fn rows(&self, ky: usize) -> (usize, usize) {
        valid_range(ky, self.pad_top, self.stride, self.h, self.oh)
    }

    fn cols(&self, kx: usize) -> (usize, usize) {
        valid_range(kx, self.pad_left, self.stride, self.w, self.ow)
    }
}

/// Output indices `[lo, hi)` for which `o * stride + k - pad` lands inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    if len + pad <= k {
        return (0, 0);
    }
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = ((len + pad - k - 1) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

#[inline]
fn axpy_strided<T: Scalar>(out: &mut [T], src: &[T], a: T, lo: usize, hi: usize, stride: usize, offset: isize) {
    if stride == 1 {
        let s0 = (lo as isize + offset) as usize;
        let n = hi - lo;
        for (o, s) in out[lo..hi].iter_mut().zip(&src[s0..s0 + n]) {
            *o += a * *s;
        }
    } else {
        for (o, slot) in out[lo..hi].iter_mut().enumerate() {
            let ix = ((o + lo) * stride) as isize + offset;
            *slot += a * src[ix as usize];
        }
    }
}

#[inline]
fn dot_strided<T: Scalar>(a: &[T], src: &[T], lo: usize, hi: usize, stride: usize, offset: isize) -> T {
    let mut acc = T::zero();
    if stride == 1 {
        let s0 = (lo as isize + offset) as usize;
        let n = hi - lo;
        for (x, y) in a[lo..hi].iter().zip(&src[s0..s0 + n]) {
            acc += *x * *y;
        }
    } else {
        for (o, x) in a[lo..hi].iter().enumerate() {
            let ix = ((o + lo) * stride) as isize + offset;
            acc += *x * src[ix as usize];
        }
    }
    acc
}

#[inline]
fn scatter_strided<T: Scalar>(dst: &mut [T], src: &[T], a: T, lo: usize, hi: usize, stride: usize, offset: isize) {
    if stride == 1 {
        let d0 = (lo as isize + offset) as usize;
        let n = hi - lo;
        for (d, s) in dst[d0..d0 + n].iter_mut().zip(&src[lo..hi]) {
            *d += a * *s;
        }
    } else {
        for (o, s) in src[lo..hi].iter().enumerate() {
            let ix = ((o + lo) * stride) as isize + offset;
            dst[ix as usize] += a * *s;
        }
    }
}

/// Dense cross-correlation. `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `bias: [Cout]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.cout * ohw];
    out.par_chunks_mut(ohw).enumerate().for_each(|(plane, o)| {
        let (b, co) = (plane / g.cout, plane % g.cout);
        if let Some(bias) = bias {
            o.iter_mut().for_each(|v| *v = bias[co]);
        }
        for ci in 0..g.cin {
            let xp = &x[(b * g.cin + ci) * hw..][..hw];
            let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
            for ky in 0..g.kh {
                let (r0, r1) = g.rows(ky);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (c0, c1) = g.cols(kx);
                    let off = kx as isize - g.pad_left as isize;
                    for oy in r0..r1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        axpy_strided(&mut o[oy * g.ow..][..g.ow], &xp[iy * g.w..][..g.w], wv, c0, c1, g.stride, off);
                    }
                }
            }
        }
    });
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(x: &[T], w: &[T], dout: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;

    let mut dx = vec![T::zero(); g.batch * g.cin * hw];
    dx.par_chunks_mut(hw).enumerate().for_each(|(plane, d)| {
        let (b, ci) = (plane / g.cin, plane % g.cin);
        for co in 0..g.cout {
            let dp = &dout[(b * g.cout + co) * ohw..][..ohw];
            let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
            for ky in 0..g.kh {
                let (r0, r1) = g.rows(ky);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (c0, c1) = g.cols(kx);
                    let off = kx as isize - g.pad_left as isize;
                    for oy in r0..r1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        scatter_strided(&mut d[iy * g.w..][..g.w], &dp[oy * g.ow..][..g.ow], wv, c0, c1, g.stride, off);
                    }
                }
            }
        }
    });

    let mut dw = vec![T::zero(); g.cout * g.cin * ksz];
    dw.par_chunks_mut(g.cin * ksz).enumerate().for_each(|(co, dwc)| {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let (r0, r1) = g.rows(ky);
                for kx in 0..g.kw {
                    let (c0, c1) = g.cols(kx);
                    let off = kx as isize - g.pad_left as isize;
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let dp = &dout[(b * g.cout + co) * ohw..][..ohw];
                        let xp = &x[(b * g.cin + ci) * hw..][..hw];
                        for oy in r0..r1 {
                            let iy = oy * g.stride + ky - g.pad_top;
                            acc += dot_strided(&dp[oy * g.ow..][..g.ow], &xp[iy * g.w..][..g.w], c0, c1, g.stride, off);
                        }
                    }
                    dwc[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });

    let db = (0..g.cout)
        .map(|co| {
            let mut acc = T::zero();
            for b in 0..g.batch {
                acc += dout[(b * g.cout + co) * ohw..][..ohw].iter().copied().sum::<T>();
            }
            acc
        })
        .collect();
    (dx, dw, db)
}

/// Per-channel cross-correlation. `w: [C,1,kh,kw]`; `g.cin == g.cout == C`.
pub fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.cout * ohw];
    out.par_chunks_mut(ohw).enumerate().for_each(|(plane, o)| {
        let c = plane % g.cout;
        let xp = &x[plane * hw..][..hw];
        let wk = &w[c * ksz..][..ksz];
        for ky in 0..g.kh {
            let (r0, r1) = g.rows(ky);
            for kx in 0..g.kw {
                let wv = wk[ky * g.kw + kx];
                let (c0, c1) = g.cols(kx);
                let off = kx as isize - g.pad_left as isize;
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad_top;
                    axpy_strided(&mut o[oy * g.ow..][..g.ow], &xp[iy * g.w..][..g.w], wv, c0, c1, g.stride, off);
                }
            }
        }
    });
    out
}

pub fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], dout: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    let mut dx = vec![T::zero(); g.batch * g.cin * hw];
    dx.par_chunks_mut(hw).enumerate().for_each(|(plane, d)| {
        let c = plane % g.cin;
        let dp = &dout[plane * ohw..][..ohw];
        let wk = &w[c * ksz..][..ksz];
        for ky in 0..g.kh {
            let (r0, r1) = g.rows(ky);
            for kx in 0..g.kw {
                let wv = wk[ky * g.kw + kx];
                let (c0, c1) = g.cols(kx);
                let off = kx as isize - g.pad_left as isize;
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad_top;
                    scatter_strided(&mut d[iy * g.w..][..g.w], &dp[oy * g.ow..][..g.ow], wv, c0, c1, g.stride, off);
                }
            }
        }
    });
    let mut dw = vec![T::zero(); g.cout * ksz];
    dw.par_chunks_mut(ksz).enumerate().for_each(|(c, dwc)| {
        for ky in 0..g.kh {
            let (r0, r1) = g.rows(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.cols(kx);
                let off = kx as isize - g.pad_left as isize;
                let mut acc = T::zero();
                for b in 0..g.batch {
                    let plane = b * g.cout + c;
                    let dp = &dout[plane * ohw..][..ohw];
                    let xp = &x[plane * hw..][..hw];
                    for oy in r0..r1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        acc += dot_strided(&dp[oy * g.ow..][..g.ow], &xp[iy * g.w..][..g.w], c0, c1, g.stride, off);
                    }
                }
                dwc[ky * g.kw + kx] = acc;
            }
        }
    });
    (dx, dw)
}

/// Batch statistics produced by a train-mode batchnorm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

pub fn batchnorm_train<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: T) -> BnForward<T> {
    let (b, c, hw) = dims;
    let n = T::lit((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / n;
        let mut ss = T::zero();
        for bi in 0..b {
            for &v in &x[(bi * c + ch) * hw..][..hw] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let corr = n / (n - T::one());
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var_unbiased: var.iter().map(|&v| v * corr).collect(),
    }
}

/// Eval-mode normalization with fixed statistics. Returns `(y, xhat, inv_std)`.
pub fn batchnorm_eval<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    dims: (usize, usize, usize),
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = dims;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. `train` selects whether batch statistics depend on `x`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[T],
    dims: (usize, usize, usize),
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = dims;
    let n = T::lit((b * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch];
            if train {
                // dbeta = sum(dy), dgamma = sum(dy * xhat)
                let (sd, sdx) = (dbeta[ch] / n, dgamma[ch] / n);
                for i in base..base + hw {
                    dx[i] = k * (dy[i] - sd - xhat[i] * sdx);
                }
            } else {
                for i in base..base + hw {
                    dx[i] = k * dy[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn swish<T: Scalar>(x: T) -> T {
    x * stable_sigmoid(x)
}

pub fn swish_grad<T: Scalar>(x: T) -> T {
    let s = stable_sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Source taps of half-pixel bilinear sampling along one axis: `(i0, i1, frac)`.
pub fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(x: &[T], planes: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<T> {
    let (ty, tx) = (bilinear_taps(src.0, dst.0), bilinear_taps(src.1, dst.1));
    let (shw, dhw) = (src.0 * src.1, dst.0 * dst.1);
    let mut out = vec![T::zero(); planes * dhw];
    out.par_chunks_mut(dhw).enumerate().for_each(|(p, o)| {
        let xp = &x[p * shw..][..shw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let top = xp[y0 * src.1 + x0] * gx + xp[y0 * src.1 + x1] * fx;
                let bot = xp[y1 * src.1 + x0] * gx + xp[y1 * src.1 + x1] * fx;
                o[oy * dst.1 + ox] = top * gy + bot * fy;
            }
        }
    });
    out
}

pub fn bilinear_backward<T: Scalar>(dout: &[T], planes: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<T> {
    let (ty, tx) = (bilinear_taps(src.0, dst.0), bilinear_taps(src.1, dst.1));
    let (shw, dhw) = (src.0 * src.1, dst.0 * dst.1);
    let mut dx = vec![T::zero(); planes * shw];
    dx.par_chunks_mut(shw).enumerate().for_each(|(p, d)| {
        let dp = &dout[p * dhw..][..dhw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let g = dp[oy * dst.1 + ox];
                d[y0 * src.1 + x0] += g * gy * gx;
                d[y0 * src.1 + x1] += g * gy * fx;
                d[y1 * src.1 + x0] += g * fy * gx;
                d[y1 * src.1 + x1] += g * fy * fx;
            }
        }
    });
    dx
}

/// 2×2 stride-2 max pooling in ceil mode. Returns pooled values and the
/// flat input index that won each window (first maximum in scan order).
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = base + 2 * oy * w + 2 * ox;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + iy * w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Top-left aligned crop / bottom-right edge replication to `dst`.
pub fn crop_pad_index(src: (usize, usize), dst: (usize, usize), planes: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(planes * dst.0 * dst.1);
    for p in 0..planes {
        for y in 0..dst.0 {
            let sy = y.min(src.0 - 1);
            for x in 0..dst.1 {
                idx.push(p * src.0 * src.1 + sy * src.1 + x.min(src.1 - 1));
            }
        }
    }
    idx
}
