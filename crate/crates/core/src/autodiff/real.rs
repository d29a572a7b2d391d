//! Scalar abstraction so the same graph code runs in `f32` (training and
//! inference) and `f64` (gradient verification).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on row-major buffers with explicit
    /// strides, so transposed operands need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
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
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output buffer too small");
                if k > 0 {
                    let a_last = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                    let b_last = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                    assert!((a_last as usize) < a.len(), "gemm lhs out of bounds");
                    assert!((b_last as usize) < b.len(), "gemm rhs out of bounds");
                }
                // SAFETY: every index touched by the kernel is bounded by the
                // asserts above and `c` is a dense m x n row-major block.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
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

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
