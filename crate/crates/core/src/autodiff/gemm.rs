//! Bounds-checked wrapper over `matrixmultiply::dgemm`.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strided {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Strided {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: Strided,
    b: &[f64],
    bv: Strided,
    beta: f64,
    c: &mut [f64],
    cv: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let ix = cv.offset + r * cv.row_stride + col * cv.col_stride;
                c[ix] *= beta;
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: a view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: b view out of bounds");
    // SAFETY: every element touched by dgemm lies within the views checked
    // above, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
