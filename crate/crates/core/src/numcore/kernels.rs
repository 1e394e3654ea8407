//! Row-major matrix kernels. Every kernel accumulates into `out`; the
//! blocking of the underlying product depends only on the shapes, so
//! results do not depend on scheduling.

use matrixmultiply::dgemm;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    // SAFETY: the slices hold exactly the row-major extents asserted above.
    unsafe {
        dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0,
            out.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    assert_eq!(g.len(), m * n);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * k);
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        dgemm(
            m, n, k, 1.0, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0,
            out.as_mut_ptr(), k as isize, 1,
        )
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(g.len(), m * n);
    assert_eq!(out.len(), k * n);
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, 1.0,
            out.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// Dot product with four independent accumulators combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}
