//! Strided general matrix multiply, `C <- alpha * A * B + beta * C`.

use crate::Scalar;

/// Row/column strides of a matrix view.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major with `cols` columns.
    pub const fn row_major(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Self {
            row: 1,
            col: cols as isize,
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`.
///
/// Slices are bounds-checked against the extent implied by the strides before
/// the call into the blocked kernel.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Scalar,
    a: &[Scalar],
    sa: Strides,
    b: &[Scalar],
    sb: Strides,
    beta: Scalar,
    c: &mut [Scalar],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_extent(a.len(), m, k, sa, "a");
    check_extent(b.len(), k, n, sb, "b");
    check_extent(c.len(), m, n, sc, "c");
    // SAFETY: every index touched by the kernel is below the extents verified
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        kernel(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, s: Strides, which: &str) {
    assert!(s.row >= 0 && s.col >= 0, "negative stride for {which}");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * s.row as usize + (cols - 1) * s.col as usize;
    assert!(last < len, "gemm operand {which} too short: {len} <= {last}");
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as kernel;

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as kernel;
