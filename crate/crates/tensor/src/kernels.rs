//! Plain-loop numeric kernels. All matrices are row-major slices; every
//! kernel accumulates into `c` so callers decide whether to zero it first.

use crate::BLOCKED_LOGIT;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        let mut p = 0;
        while p + 4 <= k {
            axpy4(
                [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]],
                [
                    &b[p * n..][..n],
                    &b[(p + 1) * n..][..n],
                    &b[(p + 2) * n..][..n],
                    &b[(p + 3) * n..][..n],
                ],
                crow,
            );
            p += 4;
        }
        for q in p..k {
            axpy(arow[q], &b[q * n..][..n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(arow, brow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut p = 0;
    while p + 4 <= k {
        let ar = [&a[p * m..][..m], &a[(p + 1) * m..][..m], &a[(p + 2) * m..][..m], &a[(p + 3) * m..][..m]];
        let br = [&b[p * n..][..n], &b[(p + 1) * n..][..n], &b[(p + 2) * n..][..n], &b[(p + 3) * n..][..n]];
        for (i, crow) in c.chunks_exact_mut(n).enumerate() {
            axpy4([ar[0][i], ar[1][i], ar[2][i], ar[3][i]], br, crow);
        }
        p += 4;
    }
    for q in p..k {
        let brow = &b[q * n..][..n];
        for (&av, crow) in a[q * m..][..m].iter().zip(c.chunks_exact_mut(n)) {
            axpy(av, brow, crow);
        }
    }
}

/// `y += Σ alpha[r]·x[r]`, touching `y` once.
#[inline]
pub fn axpy4(alpha: [f32; 4], x: [&[f32]; 4], y: &mut [f32]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += alpha[0] * x0[j] + alpha[1] * x1[j] + alpha[2] * x2[j] + alpha[3] * x3[j];
    }
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes
/// without relying on float reassociation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// In-place softmax of one row, blocked entries forced to exactly zero.
///
/// Blocked logits get [`BLOCKED_LOGIT`] added before normalization and are
/// hard-zeroed afterwards. Returns `false` when no entry is allowed.
pub fn masked_softmax_row(row: &mut [f32], allow: &[bool]) -> bool {
    debug_assert_eq!(row.len(), allow.len());
    if !allow.iter().any(|&a| a) {
        return false;
    }
    for (x, &a) in row.iter_mut().zip(allow) {
        if !a {
            *x += BLOCKED_LOGIT;
        }
    }
    softmax_row(row);
    for (x, &a) in row.iter_mut().zip(allow) {
        if !a {
            *x = 0.0;
        }
    }
    true
}

pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Log-softmax of one row, computed in f64 for the normalizer.
pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
    let lse = max as f64 + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x as f64 - lse) as f32;
    }
}
