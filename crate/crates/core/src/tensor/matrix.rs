use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from external row-major data, rejecting NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Matrix::from_vec entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.data[i * n + j] = dot_slices(a_row, b_row);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `self + a · b`, the shifted weight `W + P B`.
    ///
    /// Every code path that forms `W + P B` goes through here so that the
    /// committed outer iterate and the subproblem evaluation round identically.
    pub fn add_product(&self, a: &Self, b: &Self) -> Result<Self> {
        let prod = a.matmul(b)?;
        self.check_same_shape(&prod, "add_product")?;
        Ok(self.zip_map(&prod, |w, pb| w + pb))
    }

    /// In-place `self += alpha · x`.
    pub fn axpy(&mut self, alpha: T, x: &Self) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn scale_in_place(&mut self, alpha: T) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn frob_norm_sq(&self) -> T {
        dot_slices(&self.data, &self.data)
    }

    pub fn frob_norm(&self) -> T {
        self.frob_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| if x.abs() > acc { x.abs() } else { acc })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors with `location` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, location: impl FnOnce() -> String) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(location()))
        }
    }

    /// Copies columns `[start, start + count)` into a new matrix.
    pub fn columns(&self, start: usize, count: usize) -> Self {
        Self::from_fn(self.rows, count, |i, j| self[(i, start + j)])
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }
}

#[inline]
fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four accumulators let the optimizer vectorize without reassociating.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let i3 = Matrix::<f64>::identity(3);
        assert_eq!(i3.matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[2.0], &[4.0]]).unwrap());
    }

    #[test]
    fn matches_triple_loop_exactly() {
        let mut rng = RngStream::new(7, 0);
        let a: Matrix<f64> = rng.gauss(7, 5, 1.0).unwrap();
        let b: Matrix<f64> = rng.gauss(5, 3, 1.0).unwrap();
        // Same summation order as the oracle, so equality is exact.
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = RngStream::new(3, 1);
        let a: Matrix<f64> = rng.gauss(6, 4, 1.0).unwrap();
        let b: Matrix<f64> = rng.gauss(6, 5, 1.0).unwrap();
        let c: Matrix<f64> = rng.gauss(3, 4, 1.0).unwrap();
        let tn = a.matmul_tn(&b).unwrap();
        let tn_ref = naive_matmul(&a.transpose(), &b);
        assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-13);
        let nt = a.matmul_nt(&c).unwrap();
        let nt_ref = naive_matmul(&a, &c.transpose());
        assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
        assert!(matches!(a.add(&Matrix::zeros(3, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = RngStream::new(11, 4);
        for _ in 0..10 {
            let a: Matrix<f64> = rng.gauss(6, 9, 1.0).unwrap();
            let b: Matrix<f64> = rng.gauss(9, 4, 1.0).unwrap();
            let c: Matrix<f64> = rng.gauss(4, 7, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frob_norm() / left.frob_norm();
            assert!(rel < 1e-10, "relative error {rel}");
        }
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = a.matmul(&Matrix::identity(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frob_norm_sq(), 30.0);
    }
}
