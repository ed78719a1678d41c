//! Inner matrix kernels shared by matmul, convolution and attention.
//!
//! Plain nested loops ordered for contiguous row access; rustc autovectorizes
//! them well enough for desk-scale work. Accumulation order is fixed
//! (ascending over the contraction index) so results are bit-reproducible and
//! match naive triple-loop oracles exactly.

use crate::scalar::Real;

/// c[m x n] = a[m x k] * b[k x n]
pub(crate) fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    mm_nn_into(a, b, &mut c, m, k, n);
    c
}

/// c[m x n] += a[m x k] * b[k x n], accumulating into whatever `c` holds.
pub(crate) fn mm_nn_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m x n] = a[m x k] * b[n x k]^T
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// c[m x n] = a[k x m]^T * b[k x n]
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}
