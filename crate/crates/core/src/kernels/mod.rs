//! Raw numerical kernels over slices. The autodiff graph and the inference
//! helpers both call into these; nothing here allocates graph state.

pub mod conv;
pub mod norm;
pub mod upsample;

use crate::tensor::Float;

/// Storage order of a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Row-major `rows x cols`.
    N,
    /// Stored row-major as `cols x rows`, used transposed.
    T,
}

impl Layout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::N => (cols as isize, 1),
            Layout::T => (1, rows as isize),
        }
    }
}

/// `c (m x n) = op(a) (m x k) * op(b) (k x n)`, optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = la.strides(m, k);
    let (rsb, csb) = lb.strides(k, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; `c` is a distinct exclusive borrow.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
