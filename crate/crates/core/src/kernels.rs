//! Convolution kernels: im2col/col2im around a dense GEMM.
//!
//! All loops run in a fixed order so results are bit-identical run to run.

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`
/// and `op(b)` of shape `k x n`. Matrices are row-major; `ta`/`tb` select the
/// transposed view of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given the
    // strides chosen for row-major storage.
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

pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let ncols = oh * ow;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `img`.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let ncols = oh * ow;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `x` is `n x C x H x W` (geometry in `g`),
/// `w` is `O x C x k x k`, `b` has `O` entries.
pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_sz = g.channels * g.height * g.width;
    let mut y = vec![0.0; n * out * ncols];
    let mut cols = vec![0.0; rows * ncols];
    for i in 0..n {
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut cols);
        let yi = &mut y[i * out * ncols..(i + 1) * out * ncols];
        for (o, plane) in yi.chunks_mut(ncols).enumerate() {
            plane.fill(b[o]);
        }
        gemm(out, rows, ncols, w, false, &cols, false, 1.0, yi);
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    out: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_sz = g.channels * g.height * g.width;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out];
    let mut cols = vec![0.0; rows * ncols];
    let mut dcols = vec![0.0; rows * ncols];
    for i in 0..n {
        let dyi = &dy[i * out * ncols..(i + 1) * out * ncols];
        for (o, plane) in dyi.chunks(ncols).enumerate() {
            db[o] += plane.iter().sum::<f64>();
        }
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut cols);
        gemm(out, ncols, rows, dyi, false, &cols, true, 1.0, &mut dw);
        gemm(rows, out, ncols, w, true, dyi, false, 0.0, &mut dcols);
        col2im(&dcols, g, &mut dx[i * in_sz..(i + 1) * in_sz]);
    }
    (dx, dw, db)
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with respect to
/// its input. `g` describes the *output* image (`Co x H x W`); `x` is
/// `n x Ci x h x w` with `h, w` equal to `g.out_height(), g.out_width()`.
/// `w` is `Ci x Co x k x k`, `b` has `Co` entries.
pub fn conv_transpose_forward(x: &[f64], n: usize, cin: usize, g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let mut y = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; rows * ncols];
    for i in 0..n {
        let xi = &x[i * cin * ncols..(i + 1) * cin * ncols];
        gemm(rows, cin, ncols, w, true, xi, false, 0.0, &mut cols);
        let yi = &mut y[i * out_sz..(i + 1) * out_sz];
        for (c, p) in yi.chunks_mut(plane).enumerate() {
            p.fill(b[c]);
        }
        col2im(&cols, g, yi);
    }
    y
}

pub fn conv_transpose_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.channels];
    let mut dcols = vec![0.0; rows * ncols];
    for i in 0..n {
        let dyi = &dy[i * out_sz..(i + 1) * out_sz];
        for (c, p) in dyi.chunks(plane).enumerate() {
            db[c] += p.iter().sum::<f64>();
        }
        im2col(dyi, g, &mut dcols);
        let xi = &x[i * cin * ncols..(i + 1) * cin * ncols];
        gemm(cin, rows, ncols, w, false, &dcols, false, 0.0, &mut dx[i * cin * ncols..(i + 1) * cin * ncols]);
        gemm(cin, ncols, rows, xi, false, &dcols, true, 1.0, &mut dw);
    }
    (dx, dw, db)
}
