use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense row-major matrix; one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows. An empty iterator yields a
    /// `0 x cols` matrix.
    pub fn from_rows<'a, I>(cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        let mut count = 0;
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {count} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
            count += 1;
        }
        Ok(Self {
            rows: count,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// New matrix holding the selected rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::Dimension(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// Appends the rows of `other` in place.
    pub fn append(&mut self, other: &Self) -> Result<()> {
        if self.rows == 0 {
            self.cols = other.cols;
        } else if self.cols != other.cols && other.rows > 0 {
            return Err(Error::Dimension(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Matrix<f32> {
    /// Views a rank-2 tensor as a matrix.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [rows, cols] => Self::new(*rows, *cols, t.data().to_vec()),
            other => Err(Error::Dimension(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Dimension(
                "an empty matrix has no tensor representation".into(),
            ));
        }
        Tensor::new(vec![self.rows, self.cols], self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_matches_vstack() {
        let a = Matrix::new(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(1, 2, vec![5.0f32, 6.0]).unwrap();
        let mut c = Matrix::zeros(0, 0);
        c.append(&a).unwrap();
        c.append(&b).unwrap();
        assert_eq!(c, a.vstack(&b).unwrap());
        assert!(c.append(&Matrix::zeros(1, 3)).is_err());
    }
}
