//! Dense compute kernels: GEMM and the im2col/col2im lowering used by both
//! convolution flavours.

/// Row-major `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly sized for the given strides (asserted above)
    // and `c` does not alias `a` or `b`.
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

/// Geometry of a square-kernel 2-D convolution from `(channels, h, w)` to
/// `(_, out_h, out_w)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn transpose_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        ((len - 1) * stride + kernel).checked_sub(2 * pad).filter(|&n| n > 0)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `x` into a `(channels·k·k) × (out_h·out_w)` patch matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let ncols = self.cols();
        let mut cols = vec![0.0; self.rows() * ncols];
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters a patch matrix back onto a
    /// `(channels, h, w)` buffer, summing overlaps.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let ncols = self.cols();
        let mut x = vec![0.0; self.channels * self.h * self.w];
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `out[co] = bias[co] + Σ w[co,ci,ky,kx] · x[ci, ...]`; weight is `(c_out, c_in, k, k)`.
pub(crate) fn conv2d(x: &[f64], weight: &[f64], bias: Option<&[f64]>, c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = g.im2col(x);
    let n = g.cols();
    let mut out = vec![0.0; c_out * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    gemm(c_out, g.rows(), n, weight, false, &cols, false, &mut out, bias.is_some());
    out
}

/// Returns `(dx, dweight, dbias)` for [`conv2d`].
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_out: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cols = g.im2col(x);
    let n = g.cols();
    let mut dw = vec![0.0; c_out * g.rows()];
    gemm(c_out, n, g.rows(), grad_out, false, &cols, true, &mut dw, false);
    let mut dcols = vec![0.0; g.rows() * n];
    gemm(g.rows(), c_out, n, weight, true, grad_out, false, &mut dcols, false);
    let dx = g.col2im(&dcols);
    let db = grad_out.chunks(n).map(|c| c.iter().sum()).collect();
    (dx, dw, db)
}

/// Transposed convolution with weight `(c_in, c_out, k, k)`. `g` describes the
/// forward convolution from the *output* `(c_out, H', W')` back to the input
/// `(c_in, H, W)`; this op is its adjoint.
pub(crate) fn conv_transpose2d(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_in: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    gemm(g.rows(), c_in, n, weight, true, x, false, &mut cols, false);
    let mut out = g.col2im(&cols);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += b[co];
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_in: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.cols();
    let gcols = g.im2col(grad_out);
    let mut dx = vec![0.0; c_in * n];
    gemm(c_in, g.rows(), n, weight, false, &gcols, false, &mut dx, false);
    let mut dw = vec![0.0; c_in * g.rows()];
    gemm(c_in, n, g.rows(), x, false, &gcols, true, &mut dw, false);
    let plane = g.h * g.w;
    let db = grad_out.chunks(plane).map(|c| c.iter().sum()).collect();
    (dx, dw, db)
}
