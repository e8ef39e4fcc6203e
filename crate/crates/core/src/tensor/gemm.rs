//! Thin row-major wrapper over `matrixmultiply::dgemm`.

/// `c += alpha * op(a) @ op(b)` where `op` transposes when the flag is set.
///
/// Logical dims: `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
/// Physical layouts are row-major: `a` is `[m,k]` (or `[k,m]` when `ta`),
/// `b` is `[k,n]` (or `[n,k]` when `tb`).
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_matmul() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_acc(2, 2, 2, 1.0, &a, false, &b, false, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_operands() {
        // a^T @ b with a stored [k=2, m=3]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [[1,2,3],[4,5,6]]
        let b = [1.0, 0.0, 0.0, 1.0]; // identity [2,2]... k=2, n=2
        let mut c = [0.0; 6];
        gemm_acc(3, 2, 2, 1.0, &a, true, &b, false, &mut c);
        // op(a) = [[1,4],[2,5],[3,6]]
        assert_eq!(c, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn accumulates_into_c() {
        let a = [1.0];
        let b = [2.0];
        let mut c = [10.0];
        gemm_acc(1, 1, 1, 3.0, &a, false, &b, false, &mut c);
        assert_eq!(c, [16.0]);
    }
}
