//! Dense kernels shared by the forward and backward passes.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`, all row-major. With `ta` set, `a` is stored as `k x m`; with `tb`,
/// `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of one correlation window sweep over a single image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds `image` (`channels x height x width`) into a
/// `(channels*kh*kw) x (out_h*out_w)` column matrix.
pub(crate) fn im2col(image: &[f64], w: &Window, cols: &mut [f64]) {
    let ncols = w.cols();
    debug_assert_eq!(cols.len(), w.rows() * ncols);
    for c in 0..w.channels {
        let plane = &image[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                let row = (c * w.kh + ky) * w.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..w.out_h {
                    for ox in 0..w.out_w {
                        dst[oy * w.out_w + ox] = match w.source(oy, ky, ox, kx) {
                            Some((y, x)) => plane[y * w.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `image`.
pub(crate) fn col2im(cols: &[f64], w: &Window, image: &mut [f64]) {
    let ncols = w.cols();
    debug_assert_eq!(cols.len(), w.rows() * ncols);
    for c in 0..w.channels {
        let plane = &mut image[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                let row = (c * w.kh + ky) * w.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..w.out_h {
                    for ox in 0..w.out_w {
                        if let Some((y, x)) = w.source(oy, ky, ox, kx) {
                            plane[y * w.width + x] += src[oy * w.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
