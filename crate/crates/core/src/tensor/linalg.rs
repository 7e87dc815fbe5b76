//! Dense matrix kernels.
//!
//! Observation batches are binary and mostly zero, so the left operand is
//! scanned first and a zero-skipping row kernel is used when it is sparse.
//! Everything else goes through `matrixmultiply`.

/// Fraction of zeros above which the sparse row kernel is used.
const SPARSE_THRESHOLD: f64 = 0.75;

fn zero_fraction(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let zeros = a.iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / a.len() as f64
}

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if zero_fraction(a) > SPARSE_THRESHOLD {
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let out = &mut c[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        return;
    }
    // SAFETY: the slices cover exactly m×k, k×n and m×n elements with the
    // row-major strides passed below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (+)= a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: b is read through transposed strides over its n×k buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (+)= aᵀ · b` with `a: m×k`, `b: m×n`, result `k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if !acc {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if zero_fraction(a) > SPARSE_THRESHOLD {
        for r in 0..m {
            let arow = &a[r * k..(r + 1) * k];
            let brow = &b[r * n..(r + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out = &mut c[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        return;
    }
    // SAFETY: a is read through transposed strides over its m×k buffer.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
