use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag, also used as the on-disk dtype byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_byte(b: u8) -> Option<DType> {
        match b {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element usable in a [`crate::Graph`].
pub trait Real:
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
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Additive fill for masked attention logits. Large enough that
    /// `exp(fill - max)` is exactly zero, small enough to stay finite.
    const MASK_FILL: Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, with
    /// `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Row/column strides of `op(x)` (`rows x cols`) over a row-major buffer.
fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        // stored as cols x rows
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $fill:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;
            const MASK_FILL: Self = $fill;

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs buffer too small");
                assert!(b.len() >= k * n, "gemm: rhs buffer too small");
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: bounds asserted above; strides describe in-bounds
                // row-major views of the given slices.
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
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, DType::F32, -1.0e30, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, -1.0e30, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let expected = naive(ta, tb, m, n, k, &a, &b);
            let mut c = vec![0.0; m * n];
            f64::gemm(ta, tb, m, n, k, 1.0, &a, &b, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(false, false, 1, 1, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn mask_fill_underflows_to_zero() {
        assert_eq!((f32::MASK_FILL - 3.0f32).exp(), 0.0);
        assert_eq!((f64::MASK_FILL - 3.0f64).exp(), 0.0);
    }
}
