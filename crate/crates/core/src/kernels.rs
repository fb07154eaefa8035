//! Patch extraction kernels shared by convolution and its adjoint.

use crate::real::Real;

/// Geometry of a strided, zero-padded 2-D correlation from an
/// `in_h x in_w` grid of `channels` planes onto an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Patch {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when patch extraction is the identity map.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Unfold `src` (`channels x in_h x in_w`) into `dst` (`rows x cols`).
pub(crate) fn im2col<T: Real>(src: &[T], p: &Patch, dst: &mut [T]) {
    let cols = p.cols();
    let plane = p.in_h * p.in_w;
    for c in 0..p.channels {
        let chan = &src[c * plane..(c + 1) * plane];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (c * p.kh + ki) * p.kw + kj;
                let out = &mut dst[row * cols..(row + 1) * cols];
                for oy in 0..p.out_h {
                    let line = &mut out[oy * p.out_w..(oy + 1) * p.out_w];
                    match p.source(oy, ki, p.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let srow = &chan[iy * p.in_w..(iy + 1) * p.in_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match p.source(ox, kj, p.in_w) {
                                    Some(ix) => srow[ix],
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

/// Adjoint of [`im2col`]: scatter-add `src` (`rows x cols`) into `dst`.
pub(crate) fn col2im_add<T: Real>(src: &[T], p: &Patch, dst: &mut [T]) {
    let cols = p.cols();
    let plane = p.in_h * p.in_w;
    for c in 0..p.channels {
        let chan = &mut dst[c * plane..(c + 1) * plane];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (c * p.kh + ki) * p.kw + kj;
                let inp = &src[row * cols..(row + 1) * cols];
                for oy in 0..p.out_h {
                    let Some(iy) = p.source(oy, ki, p.in_h) else {
                        continue;
                    };
                    let line = &inp[oy * p.out_w..(oy + 1) * p.out_w];
                    let drow = &mut chan[iy * p.in_w..(iy + 1) * p.in_w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = p.source(ox, kj, p.in_w) {
                            drow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}
