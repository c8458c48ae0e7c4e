use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training arithmetic) and `f64` (gradient-check mode).
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = op(a) · op(b) (+ c)` for row-major buffers.
    ///
    /// `op(a)` is `m×k`; when `a_t` is set, `a` is stored as `[k, m]`.
    /// `op(b)` is `k×n`; when `b_t` is set, `b` is stored as `[n, k]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

struct Strides {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> Strides {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    Strides { rsa, csa, rsb, csb }
}

fn check_lengths<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_lengths(m, k, n, a, b, c);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                let s = strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: buffer lengths were checked against the logical
                // extents above and the strides address exactly those extents.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        s.rsa,
                        s.csa,
                        b.as_ptr(),
                        s.rsb,
                        s.csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
