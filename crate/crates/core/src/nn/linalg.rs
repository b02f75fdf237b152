//! Thin safe wrappers over `matrixmultiply::dgemm` for row-major buffers.

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum T {
    /// Use the buffer as stored.
    N,
    /// Use the transpose of the stored buffer.
    Y,
}

/// `c = beta * c + a' * b'` where `a'` is `m x k` and `b'` is `k x n`.
/// A transposed operand is stored with its logical shape swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: T, b: &[f64], tb: T, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = match ta {
        T::N => (k as isize, 1),
        T::Y => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        T::N => (n as isize, 1),
        T::Y => (1, k as isize),
    };
    // SAFETY: the asserted lengths cover every index reachable through the strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
