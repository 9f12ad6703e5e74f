//! Raw numeric kernels shared by the forward and backward rules.

/// Row-major matrix view description: `rows × cols` logical shape, stored
/// either as is or transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical transpose of a stored `rows × cols` matrix.
    pub fn t(data: &'a [f64], stored_rows: usize, stored_cols: usize) -> Self {
        MatRef {
            data,
            rows: stored_cols,
            cols: stored_rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` for `a: M×K`, `b: K×N`, row-major `c: M×N`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slice lengths asserted above cover every element addressed
    // by the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D cross-correlation with symmetric padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let h_out = (h + 2 * pad - kernel) / stride + 1;
        let w_out = (w + 2 * pad - kernel) / stride + 1;
        ConvGeometry {
            c_in,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Visits every (column-matrix index, input index) pair that lies inside
    /// the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        let cols = self.col_cols();
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * cols + oy * self.w_out + ox, src);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.col_rows() * self.col_cols()];
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
        cols
    }

    pub fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|c, src| dx[src] += cols[c]);
    }
}
