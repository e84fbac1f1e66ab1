//! Raw numeric kernels on flat slices. Shapes are validated by the caller.

/// Row-major matrix view: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m x n) = a (m x k) * b (k x n) + beta * out`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides were checked against the slice lengths above.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1 stride-1 unpadded convolution reads the input directly as its
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = c_out * g.col_cols();
    let mut out = vec![0.0; n * out_stride];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    let wmat = Mat::new(weight, c_out, g.col_rows());
    for s in 0..n {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let col_mat = if g.is_pointwise() {
            Mat::new(xs, g.col_rows(), g.col_cols())
        } else {
            im2col(xs, g, &mut cols);
            Mat::new(&cols, g.col_rows(), g.col_cols())
        };
        let os = &mut out[s * out_stride..(s + 1) * out_stride];
        gemm(wmat, col_mat, os, 0.0);
        if let Some(b) = bias {
            for (o, bv) in os.chunks_exact_mut(g.col_cols()).zip(b) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dweight)`; each is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    n: usize,
    c_out: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = c_out * g.col_cols();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    let wmat = Mat::new(weight, c_out, g.col_rows());
    for s in 0..n {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let dys = Mat::new(
            &dy[s * out_stride..(s + 1) * out_stride],
            c_out,
            g.col_cols(),
        );
        if let Some(dw) = dw.as_mut() {
            let col_mat = if g.is_pointwise() {
                Mat::new(xs, g.col_rows(), g.col_cols())
            } else {
                im2col(xs, g, &mut cols);
                Mat::new(&cols, g.col_rows(), g.col_cols())
            };
            gemm(dys, col_mat.t(), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                gemm(wmat.t(), dys, dxs, 1.0);
            } else {
                gemm(wmat.t(), dys, &mut dcols, 0.0);
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping max pooling; ties resolve to the first element in
/// row-major window order. Returns outputs and the flat argmax per output.
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(x[best_i]);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) times c (2x4)
        let mut d = vec![0.0; 12];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&c, 2, 4), &mut d, 0.0);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * c[k * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_first_max_wins() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
