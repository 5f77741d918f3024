use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2D array of `f64`. Scalars are `1 x 1`, vectors `1 x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// An `n x 1` column vector.
    pub fn col(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            Operand::plain(self),
            Operand::plain(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }
}

/// A matrix operand for [`gemm`], optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    t: &'a Tensor,
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub(crate) fn plain(t: &'a Tensor) -> Self {
        Self { t, transposed: false }
    }

    pub(crate) fn transposed(t: &'a Tensor) -> Self {
        Self { t, transposed: true }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.t.cols, self.t.rows)
        } else {
            (self.t.rows, self.t.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let c = self.t.cols as isize;
        if self.transposed {
            (1, c)
        } else {
            (c, 1)
        }
    }
}

/// `out = beta * out + a * b`.
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut Tensor, beta: f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: strides and dimensions describe the owned, correctly sized buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.t.data.as_ptr(),
            rsa,
            csa,
            b.t.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(Tensor::new(2, 3, vec![0.0; 6]).unwrap().shape(), (2, 3));
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn gemm_with_transposes_matches_naive() {
        let a = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(3, 5, |i, j| ((i + 2 * j) % 7) as f64);
        let mut out = Tensor::zeros(4, 5);
        gemm(Operand::transposed(&a), Operand::plain(&b), &mut out, 0.0);
        let naive = a.transpose().matmul(&b).unwrap();
        assert_eq!(out, naive);
    }
}
