//! Raw slice kernels behind the tensor ops.
//!
//! Every reduction accumulates in ascending index order, so a fixed graph
//! with fixed inputs is bit-deterministic regardless of thread count:
//! parallelism only ever splits work across disjoint output rows.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 16 * 1024;

/// C = A · B with A `[m, k]`, B `[k, n]`, C `[m, n]`.
///
/// Loop order (i, t, j): for each output element the sum over `t` runs in
/// ascending order, and B is read row-contiguously.
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |c_row: &mut [S], a_row: &[S]| {
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_it * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C += A · Bᵀ with A `[m, k]`, B `[n, k]`, C `[m, n]`. Plain dot products.
pub fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |c_row: &mut [S], a_row: &[S]| {
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *c = *c + acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C += Aᵀ · B with A `[m, k]`, B `[m, n]`, C `[k, n]`.
///
/// Parallel over output rows (columns of A); the sum over `i` stays in
/// ascending order for every output element.
pub fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(t, c_row)| {
            for i in 0..m {
                let a_it = a[i * k + t];
                let b_row = &b[i * n..(i + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c = *c + a_it * bv;
                }
            }
        });
    } else {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for (t, &a_it) in a_row.iter().enumerate() {
                let c_row = &mut out[t * n..(t + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c = *c + a_it * bv;
                }
            }
        }
    }
}

/// Row-wise softmax over `[rows, cols]`, numerically stable (max-subtracted).
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for (x_row, o_row) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mut mx = x_row[0];
        for &v in &x_row[1..] {
            mx = mx.maxv(v);
        }
        let mut sum = S::ZERO;
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in o_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// log(sum(exp(row))) for one row, max-subtracted.
pub fn logsumexp_row<S: Scalar>(row: &[S]) -> S {
    let mut mx = row[0];
    for &v in &row[1..] {
        mx = mx.maxv(v);
    }
    let mut sum = S::ZERO;
    for &v in row {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_matches_hand_product() {
        // [[1,2],[3,4]] · [[5],[6]] = [[17],[39]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        mm_nn(&a, &b, 2, 2, 1, &mut c);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn transposed_kernels_agree_with_mm_nn() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect(); // [3,4]
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // [4,2]
        let mut c = vec![0.0; 6];
        mm_nn(&a, &b, 3, 4, 2, &mut c);

        // A·Bᵀᵀ via mm_nt with B stored transposed.
        let mut bt = vec![0.0; 8]; // [2,4]
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b[i * 2 + j];
            }
        }
        let mut c2 = vec![0.0; 6];
        mm_nt_acc(&a, &bt, 3, 4, 2, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // Aᵀᵀ·B via mm_tn with A stored transposed.
        let mut at = vec![0.0; 12]; // [4,3]
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut c3 = vec![0.0; 6];
        mm_tn_acc(&at, &b, 4, 3, 2, &mut c3);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [2.0f64, 0.0, -1.0, 5.0, 5.0, 5.0];
        let mut out = [0.0f64; 6];
        softmax_rows(&x, 2, 3, &mut out);
        for row in out.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // softmax([2,0]) spot value: e²/(e²+1)
        let mut o2 = [0.0f64; 2];
        softmax_rows(&[2.0, 0.0], 1, 2, &mut o2);
        assert!((o2[0] - 0.8807970779778823).abs() < 1e-15);
        assert!((o2[1] - 0.11920292202211755).abs() < 1e-15);
    }
}
