//! Small dense kernels shared by the tape operations.
//!
//! Loops are written so every output element accumulates in a fixed,
//! source-defined order: results are bitwise reproducible run-to-run, and the
//! independent-lane form still lets the compiler vectorize.

/// Dot product with four independent accumulator lanes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let ac = a.chunks_exact(4);
    let bc = b.chunks_exact(4);
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        lanes[0] += ca[0] * cb[0];
        lanes[1] += ca[1] * cb[1];
        lanes[2] += ca[2] * cb[2];
        lanes[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// y += alpha * x, elementwise.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// C = A·B for row-major A (m×k) and B (k×n).
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            if apv != 0.0 {
                axpy(apv, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
    c
}

/// D = C·Bᵀ for row-major C (m×n) and B (k×n); D is m×k.
pub(crate) fn matmul_rhs_transposed(c: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut d = vec![0.0; m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            d[i * k + p] = dot(crow, &b[p * n..(p + 1) * n]);
        }
    }
    d
}

/// D += Aᵀ·C for row-major A (m×k) and C (m×n); D is k×n.
pub(crate) fn accumulate_lhs_transposed(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, d: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(d.len(), k * n);
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &apv) in arow.iter().enumerate() {
            if apv != 0.0 {
                axpy(apv, crow, &mut d[p * n..(p + 1) * n]);
            }
        }
    }
}
