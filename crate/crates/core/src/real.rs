use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Whether a GEMM operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// Floating-point element type of the network engine.
///
/// Training runs in `f32`; gradient checks use `f64`.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    /// `c = a * b` (or `c += a * b` when `accumulate`), where `a` is `m x k`
    /// and `b` is `k x n` after applying the layouts. All buffers are dense
    /// row-major as stored.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_layout: Layout,
        b: &[Self],
        b_layout: Layout,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn strides(layout: Layout, rows: usize, cols: usize) -> (isize, isize) {
    match layout {
        Layout::Normal => (cols as isize, 1),
        Layout::Transposed => (1, rows as isize),
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_layout: Layout,
                b: &[Self],
                b_layout: Layout,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(a_layout, m, k);
                let (rsb, csb) = strides(b_layout, k, n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every index touched by
                // the given dimensions and strides lies inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
