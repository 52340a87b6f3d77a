//! Scalar abstraction over the element types the tensor engine supports.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of tensors and parameters.
///
/// The whole numeric core is generic over this trait so the same code runs
/// in single precision for training and in double precision for the
/// finite-difference gradient suites.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides,
    /// dispatched to the precision-specific gemm kernel.
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

    /// Row-major `c = a @ b` convenience wrapper.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        Self::gemm_strided(
            m,
            k,
            n,
            Self::one(),
            a,
            k as isize,
            1,
            b,
            n as isize,
            1,
            Self::zero(),
            c,
            n as isize,
            1,
        );
    }

    fn of_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}
