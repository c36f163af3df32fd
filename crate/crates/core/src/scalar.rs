//! Floating-point element type shared by every tensor in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of tensors: `f32` or `f64`.
///
/// Besides the usual float arithmetic this carries a strided GEMM kernel, so
/// the dense kernels stay generic while the inner product loop is the tuned
/// one from `matrixmultiply`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short name used in run records ("f32" / "f64").
    const NAME: &'static str;

    /// `c <- alpha * a * b + beta * c` on strided row-major views.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each operand is given as
    /// (slice, row stride, column stride). Extents are checked against the
    /// slice lengths before the kernel runs.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        beta: Self,
        c: (&mut [Self], usize, usize),
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a: (usize, usize, usize),
    b: (usize, usize, usize),
    c: (usize, usize, usize),
) {
    assert!(span(m, k, a.1, a.2) <= a.0, "gemm: lhs view out of bounds");
    assert!(span(k, n, b.1, b.2) <= b.0, "gemm: rhs view out of bounds");
    assert!(span(m, n, c.1, c.2) <= c.0, "gemm: output view out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], usize, usize),
                b: (&[Self], usize, usize),
                beta: Self,
                c: (&mut [Self], usize, usize),
            ) {
                check_extents(
                    m,
                    k,
                    n,
                    (a.0.len(), a.1, a.2),
                    (b.0.len(), b.1, b.2),
                    (c.0.len(), c.1, c.2),
                );
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches lies inside the spans
                // checked above; strides fit in isize for any in-memory slice.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_view() {
        // a = [[1,2],[3,4]], b = a^T via strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, (&a, 2, 1), (&a, 1, 2), 0.0, (&mut c, 2, 1));
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn gemm_rejects_short_slice() {
        let a = [1.0f32; 3];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, (&a, 2, 1), (&a, 2, 1), 0.0, (&mut c, 2, 1));
    }
}
