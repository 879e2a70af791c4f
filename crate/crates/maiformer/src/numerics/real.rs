//! Scalar precision abstraction: f32 for training/inference, f64 for
//! gradient verification and oracle tests.

use std::fmt::{Debug, Display};

use serde::{Deserialize, Serialize};

/// Element type tag carried by checkpoints and configs.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
        }
    }
}

/// Floating-point element of a [`Tensor`](super::Tensor).
///
/// Everything numeric in the crate is generic over this trait so that the
/// same model code runs in 32-bit for speed and 64-bit for verification.
pub trait Real:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Gauss error function, evaluated at full f64 precision.
    fn erf(self) -> Self;

    /// `out = op(a) * op(b)` for row-major matrices, where `op` optionally
    /// transposes. `a` is stored as `ar x ac`, `b` as `br x bc`; `out` must
    /// hold the full logical product.
    fn gemm(
        ar: usize,
        ac: usize,
        ta: bool,
        br: usize,
        bc: usize,
        tb: bool,
        a: &[Self],
        b: &[Self],
        out: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

fn logical_dims(r: usize, c: usize, t: bool) -> (usize, usize) {
    if t {
        (c, r)
    } else {
        (r, c)
    }
}

fn strides(c: usize, t: bool) -> (isize, isize) {
    // Row-major storage: element (i, j) lives at i*c + j. A transposed view
    // swaps the roles of the two strides.
    if t {
        (1, c as isize)
    } else {
        (c as isize, 1)
    }
}

macro_rules! impl_real {
    ($ty:ty, $dtype:expr, $bytes:expr, $gemm:path, $erf:expr) => {
        impl Real for $ty {
            const DTYPE: Dtype = $dtype;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn erf(self) -> Self {
                ($erf)(self as f64) as $ty
            }

            fn gemm(
                ar: usize,
                ac: usize,
                ta: bool,
                br: usize,
                bc: usize,
                tb: bool,
                a: &[Self],
                b: &[Self],
                out: &mut [Self],
            ) {
                let (m, k1) = logical_dims(ar, ac, ta);
                let (k2, n) = logical_dims(br, bc, tb);
                assert_eq!(k1, k2, "gemm inner dimensions must agree");
                assert_eq!(a.len(), ar * ac, "gemm lhs length");
                assert_eq!(b.len(), br * bc, "gemm rhs length");
                assert_eq!(out.len(), m * n, "gemm output length");
                let (rsa, csa) = strides(ac, ta);
                let (rsb, csb) = strides(bc, tb);
                // Lengths and strides are validated above; the raw call is the
                // only way matrixmultiply exposes strided input.
                unsafe {
                    $gemm(
                        m,
                        k1,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(bytes);
                <$ty>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, Dtype::F32, 4, matrixmultiply::sgemm, libm::erf);
impl_real!(f64, Dtype::F64, 8, matrixmultiply::dgemm, libm::erf);

/// Shorthand cast used all over the numeric code.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x)
}
