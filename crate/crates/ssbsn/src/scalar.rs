//! Element type abstraction.
//!
//! Precision is a run-mode choice, not a per-tensor one: the verification
//! suite instantiates everything at `f64` (finite-difference checks need the
//! headroom), training defaults to `f32`.

use std::fmt;

/// Scalar element of a [`crate::tensor::Tensor`].
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A * B + beta * C over row/col strides, delegated to a
    /// tuned GEMM. Shapes: A is m x k, B is k x n, C is m x n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
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

fn check_strides(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    // Conservative bound: the largest reachable index must be in range.
    let max = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(max >= 0 && (max as usize) < len, "gemm stride out of range");
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
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
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        check_strides(a.len(), m, k, rsa, csa);
        check_strides(b.len(), k, n, rsb, csb);
        check_strides(c.len(), m, n, rsc, csc);
        unsafe {
            matrixmultiply::sgemm(
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

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
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
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        check_strides(a.len(), m, k, rsa, csa);
        check_strides(b.len(), k, n, rsb, csb);
        check_strides(c.len(), m, n, rsc, csc);
        unsafe {
            matrixmultiply::dgemm(
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
