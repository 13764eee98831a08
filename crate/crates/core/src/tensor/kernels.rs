//! Low-level dense kernels shared by the tape operations.

use super::Real;

/// A strided matrix operand: (storage, row stride, column stride).
pub(crate) type Operand<'a> = (&'a [Real], isize, isize);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

/// `c = alpha * a·b + beta * c` where `a` is m×k, `b` is k×n and `c` is a
/// contiguous row-major m×n buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: Operand<'_>,
    b: Operand<'_>,
    beta: Real,
    c: &mut [Real],
) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a same-padded 2-D convolution over an H×W×C raster.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Unfolds the raster into an (H·W)×(kh·kw·C) patch matrix with zero padding.
    pub fn im2col(&self, x: &[Real]) -> Vec<Real> {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let plen = self.patch_len();
        let mut cols = vec![0.0; self.h * self.w * plen];
        for r in 0..self.h {
            for c in 0..self.w {
                let row = &mut cols[(r * self.w + c) * plen..][..plen];
                for dy in 0..self.kh {
                    let sr = r as isize + dy as isize - ph as isize;
                    if sr < 0 || sr >= self.h as isize {
                        continue;
                    }
                    for dx in 0..self.kw {
                        let sc = c as isize + dx as isize - pw as isize;
                        if sc < 0 || sc >= self.w as isize {
                            continue;
                        }
                        let src = (sr as usize * self.w + sc as usize) * self.cin;
                        let dst = (dy * self.kw + dx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back onto the raster.
    pub fn col2im_add(&self, cols: &[Real], dx: &mut [Real]) {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let plen = self.patch_len();
        for r in 0..self.h {
            for c in 0..self.w {
                let row = &cols[(r * self.w + c) * plen..][..plen];
                for dy in 0..self.kh {
                    let sr = r as isize + dy as isize - ph as isize;
                    if sr < 0 || sr >= self.h as isize {
                        continue;
                    }
                    for dx_ in 0..self.kw {
                        let sc = c as isize + dx_ as isize - pw as isize;
                        if sc < 0 || sc >= self.w as isize {
                            continue;
                        }
                        let dst = (sr as usize * self.w + sc as usize) * self.cin;
                        let src = (dy * self.kw + dx_) * self.cin;
                        dx[dst..dst + self.cin].iter_mut().zip(&row[src..src + self.cin]).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

/// Smoothed signed square root `x·(x² + eps)^(-1/4)`.
#[inline]
pub fn signed_sqrt(x: Real, eps: Real) -> Real {
    x * (x * x + eps).powf(-0.25)
}

/// Derivative of [`signed_sqrt`].
#[inline]
pub(crate) fn signed_sqrt_grad(x: Real, eps: Real) -> Real {
    let s = x * x + eps;
    (0.5 * x * x + eps) * s.powf(-1.25)
}
