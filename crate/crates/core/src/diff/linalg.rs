//! Safe wrappers over the blocked GEMM kernels for the three products the
//! dense layers need. All matrices are contiguous row-major.

use crate::real::Real;

/// Rows processed per parallel task. Fixed so that reductions over rows
/// always happen in the same order regardless of the thread count.
pub const ROW_CHUNK: usize = 2048;

/// `out[n×m] = beta·out + a[n×k] · b[m×k]ᵀ`
pub fn gemm_nt<T: Real>(n: usize, k: usize, m: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    assert!(a.len() >= n * k && b.len() >= m * k && out.len() >= n * m);
    if n == 0 || m == 0 {
        return;
    }
    // SAFETY: lengths checked above; strides describe row-major layouts.
    unsafe {
        T::gemm_raw(
            n,
            k,
            m,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        )
    }
}

/// `out[n×k] = a[n×m] · b[m×k]`
pub fn gemm_nn<T: Real>(n: usize, m: usize, k: usize, a: &[T], b: &[T], out: &mut [T]) {
    assert!(a.len() >= n * m && b.len() >= m * k && out.len() >= n * k);
    if n == 0 || k == 0 {
        return;
    }
    // SAFETY: lengths checked above.
    unsafe {
        T::gemm_raw(
            n,
            m,
            k,
            T::one(),
            a.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            k as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            k as isize,
            1,
        )
    }
}

/// `out[m×k] = beta·out + a[n×m]ᵀ · b[n×k]`
pub fn gemm_tn<T: Real>(n: usize, m: usize, k: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    assert!(a.len() >= n * m && b.len() >= n * k && out.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: lengths checked above.
    unsafe {
        T::gemm_raw(
            m,
            n,
            k,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            k as isize,
            1,
            beta,
            out.as_mut_ptr(),
            k as isize,
            1,
        )
    }
}
