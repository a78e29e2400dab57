//! Raw numeric kernels shared by the forward and backward passes.

use crate::real::Real;

/// `c (+)= op(a) · op(b)` for contiguous row-major operands, where `op(a)` is
/// `m×k` (stored `k×m` when `ta`) and `op(b)` is `k×n` (stored `n×k` when
/// `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above pin every operand to the extents implied by
    // (m, k, n) and the chosen strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }
}

/// Unfolds `[C, H, W]` into `[C·kh·kw, Ho·Wo]` with zero padding.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.cols_len()];
    let plane = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto `[C, H, W]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Corner weights of a bilinear sample, or `None` when the sample lies
/// strictly outside `[0, W−1]×[0, H−1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap<T> {
    pub x0: usize,
    pub y0: usize,
    pub fx: T,
    pub fy: T,
    pub has_x1: bool,
    pub has_y1: bool,
}

pub(crate) fn bilinear_tap<T: Real>(x: T, y: T, h: usize, w: usize) -> Option<BilinearTap<T>> {
    let max_x = T::from_usize(w - 1).unwrap();
    let max_y = T::from_usize(h - 1).unwrap();
    // NaN coordinates fail every comparison and land here too.
    if !(x >= T::zero() && x <= max_x && y >= T::zero() && y <= max_y) {
        return None;
    }
    let xf = x.floor();
    let yf = y.floor();
    let x0 = xf.to_usize().unwrap();
    let y0 = yf.to_usize().unwrap();
    Some(BilinearTap {
        x0,
        y0,
        fx: x - xf,
        fy: y - yf,
        has_x1: x0 + 1 < w,
        has_y1: y0 + 1 < h,
    })
}

impl<T: Real> BilinearTap<T> {
    /// Reads plane value at the four corners (missing corners read as zero).
    #[inline]
    pub fn corners(&self, plane: &[T], w: usize) -> [T; 4] {
        let at = |x: usize, y: usize| plane[y * w + x];
        let v00 = at(self.x0, self.y0);
        let v10 = if self.has_x1 {
            at(self.x0 + 1, self.y0)
        } else {
            T::zero()
        };
        let v01 = if self.has_y1 {
            at(self.x0, self.y0 + 1)
        } else {
            T::zero()
        };
        let v11 = if self.has_x1 && self.has_y1 {
            at(self.x0 + 1, self.y0 + 1)
        } else {
            T::zero()
        };
        [v00, v10, v01, v11]
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], w: usize, g: T) {
        let wts = self.weights();
        let mut add = |x: usize, y: usize, v: T| plane[y * w + x] = plane[y * w + x] + v;
        add(self.x0, self.y0, wts[0] * g);
        if self.has_x1 {
            add(self.x0 + 1, self.y0, wts[1] * g);
        }
        if self.has_y1 {
            add(self.x0, self.y0 + 1, wts[2] * g);
        }
        if self.has_x1 && self.has_y1 {
            add(self.x0 + 1, self.y0 + 1, wts[3] * g);
        }
    }
}
