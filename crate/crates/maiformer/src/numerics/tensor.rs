//! Dense row-major arrays with cheap clones (shared storage).

use std::sync::Arc;

use super::real::Real;
use super::NumericsError;

/// Dense array of floating-point elements in row-major order.
///
/// Clones share storage; mutation goes through [`Tensor::data_mut`] which
/// copies on write when the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count != data.len() {
            return Err(NumericsError::InvalidShape(format!(
                "shape {:?} does not describe {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); count]),
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; count]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new((0..count).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<T, NumericsError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumericsError::InvalidShape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn dims2(&self, context: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(NumericsError::ShapeMismatch {
                op: context,
                detail: format!("expected rank-2 tensor, got shape {other:?}"),
            }),
        }
    }

    #[inline]
    pub fn get2(&self, row: usize, col: usize) -> T {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "zip_map",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add_assign",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + *s;
        }
        Ok(())
    }

    /// Same storage, new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let count: usize = shape.iter().product();
        if count != self.data.len() || shape.is_empty() {
            return Err(NumericsError::InvalidShape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self, NumericsError> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors hold bitwise-identical elements.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// `out = op(a) * op(b)` where `op` optionally transposes its argument.
pub fn matmul<T: Real>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<Tensor<T>, NumericsError> {
    let (ar, ac) = a.dims2("matmul lhs")?;
    let (br, bc) = b.dims2("matmul rhs")?;
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            detail: format!(
                "inner dimensions disagree: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" },
            ),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(ar, ac, ta, br, bc, tb, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}
