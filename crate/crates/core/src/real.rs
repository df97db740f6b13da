use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;

/// Scalar type a tensor can hold. Training runs in `f32`; gradient checks
/// rerun the same code in `f64`.
pub trait Real:
    Float
    + Debug
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE_CODE: u8;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a · b` for an `m×k` by `k×n` product over strided row-major
    /// views; row and column strides are given per operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), c: &mut [Self]);
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 1;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), c: &mut [Self]) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, n as isize, 1, c.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above; `c` is a distinct, dense m×n buffer.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

impl Real for f64 {
    const DTYPE_CODE: u8 = 2;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), c: &mut [Self]) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, n as isize, 1, c.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above; `c` is a distinct, dense m×n buffer.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

fn check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}
