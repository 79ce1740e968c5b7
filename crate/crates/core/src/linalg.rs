//! Small dense kernels: row-major GEMM wrappers and a Householder
//! least-squares solve for tall skinny systems.

use alloc::vec::Vec;

/// `c = alpha * op(a) * op(b) + beta * c`, all row-major with explicit
/// strides so transposes are free. `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents match (m, k, n) and the
    // strides; every call site below is checked by the MLP shape tests.
    // gemm computes dst = alpha * dst + beta * lhs * rhs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            beta != 0.0,
            a.as_ptr(),
            a_strides.1,
            a_strides.0,
            b.as_ptr(),
            b_strides.1,
            b_strides.0,
            beta,
            alpha,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: row-major contiguous operands, extents asserted above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Minimize `|A x - y|` for row-major `A` (`rows x cols`, `rows >= cols`)
/// by Householder QR. Returns `None` if `A` is numerically rank deficient.
pub(crate) fn least_squares(a: &[f64], rows: usize, cols: usize, y: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert!(rows >= cols);
    let mut r = a.to_vec();
    let mut qty = y.to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);

    for j in 0..cols {
        let norm = libm::sqrt((j..rows).map(|i| r[i * cols + j] * r[i * cols + j]).sum::<f64>());
        if norm <= 1e-13 * scale * libm::sqrt(rows as f64) {
            return None;
        }
        let alpha = if r[j * cols + j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| r[i * cols + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * r[i * cols + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                r[i * cols + c] -= f * v[i - j];
            }
        }
        let dot: f64 = (j..rows).map(|i| v[i - j] * qty[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in j..rows {
            qty[i] -= f * v[i - j];
        }
    }

    let mut x = alloc::vec![0.0; cols];
    for j in (0..cols).rev() {
        let mut s = qty[j];
        for c in j + 1..cols {
            s -= r[j * cols + c] * x[c];
        }
        x[j] = s / r[j * cols + j];
    }
    Some(x)
}
