//! Dense kernels shared by the forward and backward passes.

/// `c = beta * c + a * b` for an `m x k` by `k x n` product with arbitrary
/// row/column strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `m x k` times `k x n`.
pub(crate) fn matmul_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    gemm(m, k, n, a, k, 1, b, n, 1, beta, c, n, 1);
}

/// `c (m x k) += g (m x n) * b^T` where `b` is row-major `k x n`.
pub(crate) fn matmul_nt_acc(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, n, k, g, n, 1, b, 1, n, 1.0, c, k, 1);
}

/// `c (k x n) += a^T * g` where `a` is row-major `m x k` and `g` is `m x n`.
pub(crate) fn matmul_tn_acc(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    gemm(k, m, n, a, 1, k, g, n, 1, 1.0, c, n, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_nn(2, 3, 2, &a, &b, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let g = [1.0, 1.0, 1.0, 1.0];
        let mut da = [0.0; 6];
        matmul_nt_acc(2, 3, 2, &g, &b, &mut da);
        assert_eq!(da, [1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        let mut db = [0.0; 6];
        matmul_tn_acc(2, 3, 2, &a, &g, &mut db);
        assert_eq!(db, [5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }
}
