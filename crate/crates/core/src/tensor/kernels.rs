//! Slice-level forward and backward kernels behind the tape ops.

use super::tape::PaddingMode;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub mode: PaddingMode,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.h_out * self.w_out
    }
}

/// Source index along one axis, or `None` for a zero-padded tap.
#[inline]
fn tap(pos: isize, len: usize, mode: PaddingMode) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        match mode {
            PaddingMode::Zero => None,
            PaddingMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Unfolds NCHW input into a `[c_in*k*k, n*h_out*w_out]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + ci) * plane..][..plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = &mut row[(b * g.h_out + oy) * g.w_out..][..g.w_out];
                        let Some(iy) = tap(iy, g.h, g.mode) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src_row = &src[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            // valid ox range where ox + kx - pad lands inside the row
                            let lo = g.pad.saturating_sub(kx).min(g.w_out);
                            let hi = (g.w + g.pad).saturating_sub(kx).min(g.w_out).max(lo);
                            if hi > lo {
                                let s0 = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                            let (left, right) = match g.mode {
                                PaddingMode::Zero => (T::zero(), T::zero()),
                                PaddingMode::Replicate => (src_row[0], src_row[g.w - 1]),
                            };
                            dst[..lo].fill(left);
                            dst[hi..].fill(right);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                *d = match tap(ix, g.w, g.mode) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.c_in + ci) * plane..][..plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let Some(iy) = tap(iy, g.h, g.mode) else {
                            continue;
                        };
                        let src = &row[(b * g.h_out + oy) * g.w_out..][..g.w_out];
                        let dst_row = &mut dst[iy * g.w..][..g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if let Some(ix) = tap(ix, g.w, g.mode) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    im2col(x, g, &mut cols);
    let mut tmp = vec![T::zero(); g.c_out * ncols];
    T::gemm(g.c_out, rows, ncols, T::one(), weight, false, &cols, false, T::zero(), &mut tmp);
    let hw = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    for co in 0..g.c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        let src = &tmp[co * ncols..(co + 1) * ncols];
        for n in 0..g.n {
            let dst = &mut out[(n * g.c_out + co) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(&src[n * hw..(n + 1) * hw]) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let hw = g.h_out * g.w_out;
    // grad_out as [c_out, n*h_out*w_out]
    let mut gt = vec![T::zero(); g.c_out * ncols];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &grad_out[(n * g.c_out + co) * hw..][..hw];
            gt[co * ncols + n * hw..][..hw].copy_from_slice(src);
        }
    }
    let bias = need.2.then(|| {
        (0..g.c_out)
            .map(|co| gt[co * ncols..(co + 1) * ncols].iter().copied().sum())
            .collect()
    });
    let weight_grad = need.1.then(|| {
        let mut cols = vec![T::zero(); rows * ncols];
        im2col(x, g, &mut cols);
        let mut dw = vec![T::zero(); g.c_out * rows];
        T::gemm(g.c_out, ncols, rows, T::one(), &gt, false, &cols, true, T::zero(), &mut dw);
        dw
    });
    let input = need.0.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        T::gemm(rows, g.c_out, ncols, T::one(), weight, true, &gt, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeometry {
    /// Clipped window `[y0, y1) x [x0, x1)` for an output cell.
    #[inline]
    fn window(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y = (oy * self.stride) as isize - self.pad as isize;
        let x = (ox * self.stride) as isize - self.pad as isize;
        let y0 = y.max(0) as usize;
        let x0 = x.max(0) as usize;
        let y1 = ((y + self.k as isize).max(0) as usize).min(self.h);
        let x1 = ((x + self.k as isize).max(0) as usize).min(self.w);
        (y0, y1, x0, x1)
    }
}

/// Averages over the valid (in-image) part of each window.
pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.planes * g.h_out * g.w_out];
    for p in 0..g.planes {
        let src = &x[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let mut acc = T::zero();
                for y in y0..y1 {
                    acc += src[y * g.w + x0..y * g.w + x1].iter().copied().sum::<T>();
                }
                let count = (y1 - y0) * (x1 - x0);
                out[(p * g.h_out + oy) * g.w_out + ox] = acc / T::of(count as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(grad_out: &[T], g: &PoolGeometry) -> Vec<T> {
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let dst = &mut dx[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let count = (y1 - y0) * (x1 - x0);
                let share = grad_out[(p * g.h_out + oy) * g.w_out + ox] / T::of(count as f64);
                for y in y0..y1 {
                    for d in &mut dst[y * g.w + x0..y * g.w + x1] {
                        *d += share;
                    }
                }
            }
        }
    }
    dx
}

/// Per-sample kernel shared across channels, replicate padding, same size.
pub(crate) fn sample_filter_forward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let kern = &kernels[b * k * k..(b + 1) * k * k];
        for ch in 0..c {
            let off = (b * c + ch) * h * w;
            let src = &x[off..off + h * w];
            let dst = &mut out[off..off + h * w];
            for y in 0..h {
                for i in 0..k {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    let src_row = &src[sy * w..(sy + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    for j in 0..k {
                        let kv = kern[i * k + j];
                        for (xx, d) in dst_row.iter_mut().enumerate() {
                            let sx = (xx as isize + j as isize - r).clamp(0, w as isize - 1);
                            *d += kv * src_row[sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn sample_filter_backward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    grad_out: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let r = (k / 2) as isize;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dk = need.1.then(|| vec![T::zero(); kernels.len()]);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * h * w;
            for y in 0..h {
                for i in 0..k {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    for j in 0..k {
                        let kv = kernels[b * k * k + i * k + j];
                        let mut acc = T::zero();
                        for xx in 0..w {
                            let sx = (xx as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                            let go = grad_out[off + y * w + xx];
                            acc += go * x[off + sy * w + sx];
                            if let Some(dx) = dx.as_mut() {
                                dx[off + sy * w + sx] += kv * go;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[b * k * k + i * k + j] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
