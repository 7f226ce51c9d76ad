//! The two element types the engine runs on.
//!
//! Training defaults to `f32`; the gradient acceptance checks run the same
//! code in `f64`.

use std::fmt::{Debug, Display};

/// Floating-point element of a [`super::Tensor`].
pub trait Scalar:
    Copy + PartialOrd + PartialEq + Debug + Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    /// Exact error function (not the tanh approximation).
    fn erf(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite_val(self) -> bool;
    fn to_bits_u64(self) -> u64;

    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn div(self, other: Self) -> Self;
    fn neg(self) -> Self;

    /// Row-major GEMM: `c = alpha * a(m x k) * b(k x n) + beta * c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(
            m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
        );
    }

    /// GEMM with explicit row/column strides for each operand; lets callers
    /// multiply by a transposed view without materializing it.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn max_linear_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    let r = (rows.max(1) - 1) as isize;
    let c = (cols.max(1) - 1) as isize;
    (r * rs + c * cs) as usize
}

macro_rules! impl_scalar {
    ($t:ty, $erf:path, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite_val(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn to_bits_u64(self) -> u64 {
                self.to_bits() as u64
            }
            #[inline]
            fn add(self, other: Self) -> Self {
                self + other
            }
            #[inline]
            fn sub(self, other: Self) -> Self {
                self - other
            }
            #[inline]
            fn mul(self, other: Self) -> Self {
                self * other
            }
            #[inline]
            fn div(self, other: Self) -> Self {
                self / other
            }
            #[inline]
            fn neg(self) -> Self {
                -self
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() > max_linear_index(m, k, rsa, csa));
                assert!(k == 0 || b.len() > max_linear_index(k, n, rsb, csb));
                assert!(c.len() > max_linear_index(m, n, rsc, csc));
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, libm::erff, matrixmultiply::sgemm);
impl_scalar!(f64, libm::erf, matrixmultiply::dgemm);
