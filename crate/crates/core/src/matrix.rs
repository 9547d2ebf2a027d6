//! Minimal row-major dense matrix used for features, Q-values and weights.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data of length {} does not fit {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Argument(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders rows so that output row `k` is input row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (k, &src) in perm.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(src));
        }
        out
    }
}

/// `out[j] += sum_i x[i] * w[i][j]` for a row-major `w` of shape `x.len() x out.len()`.
#[inline]
pub(crate) fn accumulate_vec_mat(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
}

/// `out[i] += sum_j w[i][j] * g[j]`, the transpose product used in backprop.
#[inline]
pub(crate) fn accumulate_mat_vec(w: &Matrix, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(g.len(), w.cols());
    debug_assert_eq!(out.len(), w.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o += w.row(i).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Rank-one update `w[i][j] += x[i] * g[j]`.
#[inline]
pub(crate) fn accumulate_outer(x: &[f64], g: &[f64], w: &mut Matrix) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (wij, &gj) in w.row_mut(i).iter_mut().zip(g) {
            *wij += xi * gj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mat_products_agree_with_hand_values() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 2];
        accumulate_vec_mat(&[1.0, 0.0, -1.0], &w, &mut out);
        assert_eq!(out, vec![-4.0, -4.0]);

        let mut back = vec![0.0; 3];
        accumulate_mat_vec(&w, &[1.0, 1.0], &mut back);
        assert_eq!(back, vec![3.0, 7.0, 11.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
