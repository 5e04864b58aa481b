//! im2col-based convolution kernels over a whole batch.
//!
//! Columns are laid out as `[C * kh * kw, N * oh * ow]` so that a single GEMM
//! covers the batch; row index is `(c * kh + ky) * kw + kx`, column index is
//! `(n * oh + oy) * ow + ox`.

use super::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution; `None` when the kernel does not fit.
    pub fn new(
        [n, c, h, w]: [usize; 4],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return None;
        }
        Some(ConvGeometry {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn columns(&self) -> usize {
        self.n * self.out_positions()
    }

    /// Input coordinate hit by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.columns();
    let positions = g.out_positions();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * positions..(n + 1) * positions];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let src_line = &plane[iy * g.w..(iy + 1) * g.w];
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[oy * g.ow + ox] = src_line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto an `[N, C, H, W]` buffer.
pub(crate) fn col2im<T: Element>(cols_buf: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.columns();
    let positions = g.out_positions();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * positions..(n + 1) * positions];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                plane[iy * g.w + ix] = plane[iy * g.w + ix] + src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, P]` to `[C, N * P]`.
pub(crate) fn batch_to_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[C, N * P]` to `[N, C, P]`.
pub(crate) fn channel_major_to_batch<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&x[ci * n * p + ni * p..][..p]);
        }
    }
    out
}
