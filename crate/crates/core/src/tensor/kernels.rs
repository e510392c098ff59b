//! Raw slice kernels shared by forward and backward rules.

/// Strided view of a row-major matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Column block `[start, start + width)` of a dense `rows x cols` matrix.
    pub fn columns(rows: usize, cols: usize, start: usize, width: usize) -> Self {
        Self {
            offset: start,
            rows,
            cols: width,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    check_bounds(a.len(), av);
    check_bounds(b.len(), bv);
    check_bounds(c.len(), cv);
    if av.rows == 0 || bv.cols == 0 {
        return;
    }
    // SAFETY: every strided access of the three views was bounds-checked
    // above against the backing slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(bv.offset),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

fn check_bounds(len: usize, v: View) {
    if v.rows == 0 || v.cols == 0 {
        return;
    }
    assert!(v.row_stride >= 0 && v.col_stride >= 0, "negative strides unsupported");
    let last = v.offset
        + (v.rows - 1) * v.row_stride as usize
        + (v.cols - 1) * v.col_stride as usize;
    assert!(last < len, "strided view out of bounds");
}

/// Dense `a (m x k) @ b (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(1.0, a, View::dense(m, k), b, View::dense(k, n), 0.0, &mut out, View::dense(m, n));
    out
}

/// Same-padded sliding windows of `x (len x channels)`, laid out
/// `len x (kernel * channels)` so that a convolution becomes one matmul.
pub(crate) fn im2col(x: &[f64], len: usize, channels: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let width = kernel * channels;
    let mut col = vec![0.0; len * width];
    for t in 0..len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            col[t * width + j * channels..t * width + (j + 1) * channels]
                .copy_from_slice(&x[src * channels..(src + 1) * channels]);
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add window gradients back onto the input.
pub(crate) fn col2im(dcol: &[f64], len: usize, channels: usize, kernel: usize, dx: &mut [f64]) {
    let pad = (kernel - 1) / 2;
    let width = kernel * channels;
    for t in 0..len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..channels {
                dx[src * channels + c] += dcol[t * width + j * channels + c];
            }
        }
    }
}

/// In-place softmax of each contiguous row of length `n`.
pub(crate) fn softmax_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
