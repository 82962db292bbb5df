//! Plain-slice compute kernels behind the tape operations.
//!
//! Convolution is cross-correlation (the deep-learning convention, no kernel
//! flip). Results are deterministic for fixed inputs: every output element is
//! reduced in a fixed order by exactly one thread.

use crate::tensor::{sc, Scalar};
use rayon::prelude::*;

/// Work threshold below which convolution stays single-threaded.
const PAR_MIN_MACS: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_extent + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn macs(&self) -> usize {
        self.n * self.c_out * self.oh * self.ow * self.c_in * self.kh * self.kw
    }
}

/// Valid kernel-index range so that `o * stride - pad + k` stays in `[0, extent)`.
#[inline]
fn kernel_range(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = o as isize * stride as isize - pad as isize;
    let lo = (-base).max(0) as usize;
    let hi = (extent as isize - base).clamp(0, k as isize) as usize;
    (lo, hi)
}

pub fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], bias: &[T], d: ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c_out * d.oh * d.ow];
    let slab = d.oh * d.ow;
    let run = |slab_idx: usize, out_slab: &mut [T]| {
        let n = slab_idx / d.c_out;
        let o = slab_idx % d.c_out;
        let x_n = &x[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        let w_o = &wt[o * d.c_in * d.kh * d.kw..(o + 1) * d.c_in * d.kh * d.kw];
        for oh in 0..d.oh {
            let (kh_lo, kh_hi) = kernel_range(oh, d.stride, d.pad, d.kh, d.h);
            let ih_base = oh as isize * d.stride as isize - d.pad as isize;
            for ow in 0..d.ow {
                let (kw_lo, kw_hi) = kernel_range(ow, d.stride, d.pad, d.kw, d.w);
                let iw_base = ow as isize * d.stride as isize - d.pad as isize;
                let iw_lo = (iw_base + kw_lo as isize) as usize;
                let span = kw_hi - kw_lo;
                let mut acc = bias[o];
                for c in 0..d.c_in {
                    let x_c = &x_n[c * d.h * d.w..];
                    let w_c = &w_o[c * d.kh * d.kw..];
                    for kh in kh_lo..kh_hi {
                        let ih = (ih_base + kh as isize) as usize;
                        let x_seg = &x_c[ih * d.w + iw_lo..ih * d.w + iw_lo + span];
                        let w_seg = &w_c[kh * d.kw + kw_lo..kh * d.kw + kw_lo + span];
                        for (xv, wv) in x_seg.iter().zip(w_seg) {
                            acc = acc + *xv * *wv;
                        }
                    }
                }
                out_slab[oh * d.ow + ow] = acc;
            }
        }
    };
    if d.macs() >= PAR_MIN_MACS {
        out.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(i, s)| run(i, s));
    } else {
        for (i, s) in out.chunks_mut(slab).enumerate() {
            run(i, s);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input. Scatter form, one batch slab per task.
pub fn conv2d_backward_input<T: Scalar>(gout: &[T], wt: &[T], d: ConvDims) -> Vec<T> {
    let mut gx = vec![T::zero(); d.n * d.c_in * d.h * d.w];
    let slab = d.c_in * d.h * d.w;
    let run = |n: usize, gx_n: &mut [T]| {
        for o in 0..d.c_out {
            let g_no = &gout[(n * d.c_out + o) * d.oh * d.ow..];
            let w_o = &wt[o * d.c_in * d.kh * d.kw..];
            for oh in 0..d.oh {
                let (kh_lo, kh_hi) = kernel_range(oh, d.stride, d.pad, d.kh, d.h);
                let ih_base = oh as isize * d.stride as isize - d.pad as isize;
                for ow in 0..d.ow {
                    let g = g_no[oh * d.ow + ow];
                    if g == T::zero() {
                        continue;
                    }
                    let (kw_lo, kw_hi) = kernel_range(ow, d.stride, d.pad, d.kw, d.w);
                    let iw_lo = (ow as isize * d.stride as isize - d.pad as isize
                        + kw_lo as isize) as usize;
                    let span = kw_hi - kw_lo;
                    for c in 0..d.c_in {
                        let w_c = &w_o[c * d.kh * d.kw..];
                        for kh in kh_lo..kh_hi {
                            let ih = (ih_base + kh as isize) as usize;
                            let base = c * d.h * d.w + ih * d.w + iw_lo;
                            let gx_seg = &mut gx_n[base..base + span];
                            let w_seg = &w_c[kh * d.kw + kw_lo..kh * d.kw + kw_lo + span];
                            for (gxv, wv) in gx_seg.iter_mut().zip(w_seg) {
                                *gxv = *gxv + g * *wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.macs() >= PAR_MIN_MACS {
        gx.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(n, s)| run(n, s));
    } else {
        for (n, s) in gx.chunks_mut(slab).enumerate() {
            run(n, s);
        }
    }
    gx
}

/// Gradient w.r.t. the convolution weights. One output channel per task.
pub fn conv2d_backward_weight<T: Scalar>(gout: &[T], x: &[T], d: ConvDims) -> Vec<T> {
    let mut gw = vec![T::zero(); d.c_out * d.c_in * d.kh * d.kw];
    let slab = d.c_in * d.kh * d.kw;
    let run = |o: usize, gw_o: &mut [T]| {
        for n in 0..d.n {
            let g_no = &gout[(n * d.c_out + o) * d.oh * d.ow..];
            let x_n = &x[n * d.c_in * d.h * d.w..];
            for oh in 0..d.oh {
                let (kh_lo, kh_hi) = kernel_range(oh, d.stride, d.pad, d.kh, d.h);
                let ih_base = oh as isize * d.stride as isize - d.pad as isize;
                for ow in 0..d.ow {
                    let g = g_no[oh * d.ow + ow];
                    if g == T::zero() {
                        continue;
                    }
                    let (kw_lo, kw_hi) = kernel_range(ow, d.stride, d.pad, d.kw, d.w);
                    let iw_lo = (ow as isize * d.stride as isize - d.pad as isize
                        + kw_lo as isize) as usize;
                    let span = kw_hi - kw_lo;
                    for c in 0..d.c_in {
                        let x_c = &x_n[c * d.h * d.w..];
                        for kh in kh_lo..kh_hi {
                            let ih = (ih_base + kh as isize) as usize;
                            let x_seg = &x_c[ih * d.w + iw_lo..ih * d.w + iw_lo + span];
                            let base = c * d.kh * d.kw + kh * d.kw + kw_lo;
                            let gw_seg = &mut gw_o[base..base + span];
                            for (gwv, xv) in gw_seg.iter_mut().zip(x_seg) {
                                *gwv = *gwv + g * *xv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.macs() >= PAR_MIN_MACS {
        gw.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(o, s)| run(o, s));
    } else {
        for (o, s) in gw.chunks_mut(slab).enumerate() {
            run(o, s);
        }
    }
    gw
}

pub fn conv2d_backward_bias<T: Scalar>(gout: &[T], d: ConvDims) -> Vec<T> {
    let mut gb = vec![T::zero(); d.c_out];
    for n in 0..d.n {
        for (o, gbo) in gb.iter_mut().enumerate() {
            let g_no = &gout[(n * d.c_out + o) * d.oh * d.ow..(n * d.c_out + o + 1) * d.oh * d.ow];
            let mut acc = T::zero();
            for &g in g_no {
                acc = acc + g;
            }
            *gbo = *gbo + acc;
        }
    }
    gb
}

/// Bilinear sample of `m` at displaced locations `p + disp(p)`, border clamped.
///
/// `m` is `[N,C,H,W]`; `disp` is `[N,2,H,W]` with channel 0 the row offset and
/// channel 1 the column offset, both in pixels.
pub fn warp_forward<T: Scalar>(
    m: &[T],
    disp: &[T],
    n_: usize,
    c_: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n_ * c_ * h * w];
    let hw = h * w;
    for n in 0..n_ {
        let d_r = &disp[n * 2 * hw..];
        let d_c = &disp[n * 2 * hw + hw..];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let (r0, r1, fr) = clamp_lerp(sc::<T>(r as f64) + d_r[p], h);
                let (c0, c1, fc) = clamp_lerp(sc::<T>(c as f64) + d_c[p], w);
                let one = T::one();
                for ch in 0..c_ {
                    let m_ch = &m[(n * c_ + ch) * hw..];
                    let v = m_ch[r0 * w + c0] * (one - fr) * (one - fc)
                        + m_ch[r0 * w + c1] * (one - fr) * fc
                        + m_ch[r1 * w + c0] * fr * (one - fc)
                        + m_ch[r1 * w + c1] * fr * fc;
                    out[(n * c_ + ch) * hw + p] = v;
                }
            }
        }
    }
    out
}

/// Clamp a sample coordinate to the border and split into corner indices and
/// the interpolation fraction.
#[inline]
fn clamp_lerp<T: Scalar>(coord: T, extent: usize) -> (usize, usize, T) {
    let max = sc::<T>((extent - 1) as f64);
    let x = coord.max(T::zero()).min(max);
    let i0 = x.floor();
    let f = x - i0;
    let i0 = i0.to_usize().unwrap_or(0).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, f)
}

/// Gradients of the bilinear warp w.r.t. the sampled image and the displacement.
pub fn warp_backward<T: Scalar>(
    gout: &[T],
    m: &[T],
    disp: &[T],
    n_: usize,
    c_: usize,
    h: usize,
    w: usize,
    need_m: bool,
    need_disp: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut gm = if need_m {
        Some(vec![T::zero(); n_ * c_ * h * w])
    } else {
        None
    };
    let mut gd = if need_disp {
        Some(vec![T::zero(); n_ * 2 * h * w])
    } else {
        None
    };
    let hw = h * w;
    let one = T::one();
    for n in 0..n_ {
        let d_r = &disp[n * 2 * hw..];
        let d_c = &disp[n * 2 * hw + hw..];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let yr = sc::<T>(r as f64) + d_r[p];
                let xc = sc::<T>(c as f64) + d_c[p];
                let (r0, r1, fr) = clamp_lerp(yr, h);
                let (c0, c1, fc) = clamp_lerp(xc, w);
                // The clamp saturates outside the image: no gradient there.
                let in_r = yr > T::zero() && yr < sc::<T>((h - 1) as f64);
                let in_c = xc > T::zero() && xc < sc::<T>((w - 1) as f64);
                let mut g_fr = T::zero();
                let mut g_fc = T::zero();
                for ch in 0..c_ {
                    let g = gout[(n * c_ + ch) * hw + p];
                    if g == T::zero() {
                        continue;
                    }
                    let m_ch = &m[(n * c_ + ch) * hw..];
                    let m00 = m_ch[r0 * w + c0];
                    let m01 = m_ch[r0 * w + c1];
                    let m10 = m_ch[r1 * w + c0];
                    let m11 = m_ch[r1 * w + c1];
                    if let Some(gm) = gm.as_mut() {
                        let base = (n * c_ + ch) * hw;
                        gm[base + r0 * w + c0] =
                            gm[base + r0 * w + c0] + g * (one - fr) * (one - fc);
                        gm[base + r0 * w + c1] = gm[base + r0 * w + c1] + g * (one - fr) * fc;
                        gm[base + r1 * w + c0] = gm[base + r1 * w + c0] + g * fr * (one - fc);
                        gm[base + r1 * w + c1] = gm[base + r1 * w + c1] + g * fr * fc;
                    }
                    if need_disp {
                        g_fr = g_fr + g * ((m10 - m00) * (one - fc) + (m11 - m01) * fc);
                        g_fc = g_fc + g * ((m01 - m00) * (one - fr) + (m11 - m10) * fr);
                    }
                }
                if let Some(gd) = gd.as_mut() {
                    if in_r {
                        gd[n * 2 * hw + p] = g_fr;
                    }
                    if in_c {
                        gd[n * 2 * hw + hw + p] = g_fc;
                    }
                }
            }
        }
    }
    (gm, gd)
}

/// Per-pixel soft bin assignment with a truncated Gaussian Parzen kernel.
///
/// Input values are remapped from `[lo, hi]` to bin coordinates and clamped.
/// Each row of the `[P, bins]` output is normalized to sum to one, so a
/// histogram assembled from these weights carries one unit of mass per pixel.
pub struct ParzenCfg {
    pub bins: usize,
    /// Kernel bandwidth in units of one bin width.
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Kernel support radius in bin units.
pub const PARZEN_TRUNCATION_SIGMAS: f64 = 3.0;

/// Gaussian value at the truncation radius. Subtracting it keeps the kernel
/// continuous at the support edge; a hard cut would put a genuine value
/// discontinuity into every histogram-based loss.
#[inline]
fn parzen_tail() -> f64 {
    (-PARZEN_TRUNCATION_SIGMAS * PARZEN_TRUNCATION_SIGMAS / 2.0).exp()
}

impl ParzenCfg {
    /// Bin-space coordinate of a raw value; bin `i` is centered at `i`.
    #[inline]
    pub fn bin_coord(&self, v: f64) -> f64 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        t * self.bins as f64 - 0.5
    }

    #[inline]
    fn support(&self, z: f64) -> (usize, usize) {
        let r = PARZEN_TRUNCATION_SIGMAS * self.sigma;
        let lo = (z - r).ceil().max(0.0) as usize;
        let hi = ((z + r).floor() as isize).clamp(0, self.bins as isize - 1) as usize;
        (lo, hi.max(lo).min(self.bins - 1))
    }
}

pub fn parzen_forward<T: Scalar>(x: &[T], cfg: &ParzenCfg) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() * cfg.bins];
    let inv2s2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let tail = parzen_tail();
    for (p, &v) in x.iter().enumerate() {
        let z = cfg.bin_coord(v.to_f64_c());
        let (lo, hi) = cfg.support(z);
        let mut s = 0.0;
        for i in lo..=hi {
            let d = z - i as f64;
            s += (-d * d * inv2s2).exp() - tail;
        }
        let row = &mut out[p * cfg.bins..(p + 1) * cfg.bins];
        for (i, ri) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = z - i as f64;
            *ri = sc(((-d * d * inv2s2).exp() - tail) / s);
        }
    }
    out
}

pub fn parzen_backward<T: Scalar>(gout: &[T], x: &[T], cfg: &ParzenCfg) -> Vec<T> {
    let mut gx = vec![T::zero(); x.len()];
    let inv2s2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let invs2 = 1.0 / (cfg.sigma * cfg.sigma);
    let dz_dv = cfg.bins as f64 / (cfg.hi - cfg.lo);
    for (p, &v) in x.iter().enumerate() {
        let vf = v.to_f64_c();
        let t = (vf - cfg.lo) / (cfg.hi - cfg.lo);
        if !(0.0..=1.0).contains(&t) {
            continue; // clamped: saturated, zero gradient
        }
        let z = cfg.bin_coord(vf);
        let (lo, hi) = cfg.support(z);
        let tail = parzen_tail();
        let mut s = 0.0;
        let mut ds = 0.0; // dS/dz; the subtracted tail is constant in z
        for i in lo..=hi {
            let d = z - i as f64;
            let g = (-d * d * inv2s2).exp();
            s += g - tail;
            ds += -d * invs2 * g;
        }
        let grow = &gout[p * cfg.bins..(p + 1) * cfg.bins];
        let mut acc = 0.0;
        for i in lo..=hi {
            let d = z - i as f64;
            let g = (-d * d * inv2s2).exp();
            let dg = -d * invs2 * g;
            // d((g_i - tail) / S)/dz, quotient rule
            let dwdz = (dg * s - (g - tail) * ds) / (s * s);
            acc += grow[i].to_f64_c() * dwdz;
        }
        gx[p] = sc(acc * dz_dv);
    }
    gx
}
