//! Dense matrix kernels.
//!
//! `matmul` keeps a 4x16 output tile in registers across the whole k loop
//! (fixed-size accumulator arrays vectorize and stay out of memory), with
//! fused multiply-adds in the tile body. Ragged edges fall back to a plain
//! row-at-a-time i-k-j loop. Transposed operand forms are handled by
//! materializing the transpose and reusing the one fast kernel; the copy is
//! O(mn) against the O(mkn) multiply.

use super::tensor::Elem;

const JT: usize = 16;

/// `out[m,n] += a[m,k] @ b[k,n]`. `out` must start zeroed by the caller if
/// a plain product is wanted.
pub fn matmul_acc<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let mut j = 0;
        while j + JT <= n {
            let mut acc = [[E::ZERO; JT]; 4];
            for p in 0..k {
                let bj = &b[p * n + j..p * n + j + JT];
                let v0 = a[i * k + p];
                let v1 = a[(i + 1) * k + p];
                let v2 = a[(i + 2) * k + p];
                let v3 = a[(i + 3) * k + p];
                for t in 0..JT {
                    let bv = bj[t];
                    acc[0][t] = v0.mul_add(bv, acc[0][t]);
                    acc[1][t] = v1.mul_add(bv, acc[1][t]);
                    acc[2][t] = v2.mul_add(bv, acc[2][t]);
                    acc[3][t] = v3.mul_add(bv, acc[3][t]);
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut out[(i + r) * n + j..(i + r) * n + j + JT];
                for t in 0..JT {
                    crow[t] += accr[t];
                }
            }
            j += JT;
        }
        if j < n {
            rows_tail(a, b, out, i, i + 4, j, k, n);
        }
        i += 4;
    }
    if i < m {
        rows_tail(a, b, out, i, m, 0, k, n);
    }
}

/// Plain i-k-j accumulation for rows `i0..i1`, columns `j0..n`.
fn rows_tail<E: Elem>(a: &[E], b: &[E], out: &mut [E], i0: usize, i1: usize, j0: usize, k: usize, n: usize) {
    for i in i0..i1 {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let v = arow[p];
            let brow = &b[p * n + j0..(p + 1) * n];
            for (c, bv) in crow.iter_mut().zip(brow) {
                *c = v.mul_add(*bv, *c);
            }
        }
    }
}

/// `a[m,k] @ b[k,n]` into a fresh buffer.
pub fn matmul<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// Row-major transpose of an `[m,n]` matrix.
pub fn transpose<E: Elem>(a: &[E], m: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
