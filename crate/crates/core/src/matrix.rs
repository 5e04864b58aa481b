use crate::autodiff::Element;
use crate::error::{Error, Result};

/// Row-major `f64` feature matrix, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// `self * other^T`, shape `[self.rows, other.rows]`.
    pub fn inner_products(&self, other: &Matrix) -> Result<Vec<f64>> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "inner products need equal widths, got {} and {}",
                self.cols, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.rows];
        f64::gemm(
            false,
            true,
            self.rows,
            self.cols,
            other.rows,
            1.0,
            &self.data,
            &other.data,
            0.0,
            &mut out,
        );
        Ok(out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = self.iter_rows().map(f).collect();
        Matrix::from_rows(&rows)
    }
}
