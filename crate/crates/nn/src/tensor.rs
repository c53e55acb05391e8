use crate::error::{NnError, Result};
use crate::scalar::Scalar;

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(NnError::Shape(format!(
                "{} values for tensor {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements of one sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert!(self.same_dims(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}
