//! Plain-loop matrix kernels.
//!
//! Every output element accumulates over the inner index strictly left to
//! right; only the loop nest around that order is blocked.

use super::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += A·b` where `A[r, c] = a[r·rs + c·cs]`.
///
/// Tiles of `MR × NR` outputs are held in registers while the inner index
/// runs in order, so every element sees the same sequence of additions as
/// the plain triple loop.
fn gemm_acc<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[T::ZERO; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for kk in 0..k {
                    let brow: &[T; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * rs + kk * cs];
                        for c in 0..NR {
                            row[c] += av * brow[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in i0..i0 + mr {
                    for kk in 0..k {
                        let av = a[r * rs + kk * cs];
                        let brow = &b[kk * n + j0..kk * n + j0 + nr];
                        for (o, &bv) in out[r * n + j0..r * n + j0 + nr].iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            j0 += nr;
        }
        i0 += mr;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|x| *x = T::ZERO);
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_acc(a, k, 1, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    gemm_acc(a, 1, k, b, out, k, m, n);
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
