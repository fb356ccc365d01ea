//! Raw dense kernels shared by the graph ops and the chunked-loss path.

use super::Scalar;

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row.iter()) {
                *c_ij = *c_ij + a_it * b_tj;
            }
        }
    }
}

/// c[m,n] = a[m,k] · b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ  (dot products over contiguous rows)
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (t, c_it) in c_row.iter_mut().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *c_it = *c_it + acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == T::zero() {
                continue;
            }
            let c_row = &mut c[t * n..(t + 1) * n];
            for (c_tj, &b_ij) in c_row.iter_mut().zip(b_row.iter()) {
                *c_tj = *c_tj + a_it * b_ij;
            }
        }
    }
}

/// Row-major 2D transpose.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// In-place softmax of a slice with max-subtraction.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0_f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // a · b == a · (bᵀ)ᵀ via matmul_nt
        let bt = transpose(&b, 3, 2); // 2x3
        let mut c_nt = vec![0.0; 4];
        matmul_nt_acc(&a, &bt, &mut c_nt, 2, 3, 2);
        assert_eq!(c, c_nt);

        // aᵀ · b with a 3x2 treated as (2x3)ᵀ
        let at = transpose(&a, 2, 3); // 3x2
        let mut c_tn = vec![0.0; 4];
        matmul_tn_acc(&at, &b, &mut c_tn, 3, 2, 2);
        assert_eq!(c, c_tn);
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let row = [1000.0_f64, 1000.0];
        let lse = logsumexp(&row);
        assert!((lse - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }
}
