//! im2col/col2im convolution kernels over single NCHW items.
//!
//! A transposed convolution is the adjoint of a convolution with the same
//! geometry, so both directions share the two gather/scatter routines below.

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    /// Spatial size of the dense ("image") side.
    pub in_h: usize,
    pub in_w: usize,
    /// Spatial size of the strided ("grid") side.
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel {kernel} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_size(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (size - 1) * stride + kernel + out_pad - 2 * pad
}

pub fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.in_h * g.in_w;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the image.
pub fn col2im(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.in_h * g.in_w;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `a` is
/// `m x k` after the optional transpose and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the full extents implied by the dims and strides.
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

/// Forward convolution of one item. `weight` is `[out_ch, g.channels, k, k]`.
pub fn conv_forward(
    image: &[f64],
    weight: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
) {
    let cols = if g.is_pointwise() {
        image
    } else {
        scratch.resize(g.col_rows() * g.col_cols(), 0.0);
        im2col(image, g, scratch);
        scratch.as_slice()
    };
    gemm(out_ch, g.col_rows(), g.col_cols(), weight, false, cols, false, 0.0, out);
}

/// Gradients of [`conv_forward`] for one item; accumulates into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    image: &[f64],
    weight: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    grad_out: &[f64],
    grad_image: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    if let Some(gw) = grad_weight {
        if g.is_pointwise() {
            gemm(out_ch, ncols, rows, grad_out, false, image, true, 1.0, gw);
        } else {
            scratch.resize(rows * ncols, 0.0);
            im2col(image, g, scratch);
            gemm(out_ch, ncols, rows, grad_out, false, scratch, true, 1.0, gw);
        }
    }
    if let Some(gi) = grad_image {
        if g.is_pointwise() {
            gemm(rows, out_ch, ncols, weight, true, grad_out, false, 1.0, gi);
        } else {
            scratch.resize(rows * ncols, 0.0);
            gemm(rows, out_ch, ncols, weight, true, grad_out, false, 0.0, scratch);
            col2im(scratch, g, gi);
        }
    }
}
