//! Shared raw math kernels (no tape involvement).

use crate::autodiff::tensor::Real;

/// `out[m,n] += a[m,k] . b[k,n]`.
pub(crate) fn matmul_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Allocating `a[m,k] . b[k,n]`.
pub(crate) fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// Transpose a row-major `[m, n]` slice into `[n, m]`.
pub(crate) fn transpose_slice<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `out[c] += sum_r a[r, c]` over a row-major `[rows, cols]` slice.
pub(crate) fn colsum<F: Real>(a: &[F], rows: usize, cols: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c] = out[c] + a[r * cols + c];
        }
    }
}
