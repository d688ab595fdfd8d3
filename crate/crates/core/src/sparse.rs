//! Row-compressed sparse matrix built from coordinate triplets.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    /// Builds the matrix, summing duplicate entries. Exact zeros are kept out.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
            rows[i].push((j, v));
        }
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for &(j, v) in row.iter() {
                match merged.last_mut() {
                    Some((lj, lv)) if *lj == j => *lv += v,
                    _ => merged.push((j, v)),
                }
            }
            merged.retain(|&(_, v)| v != 0.0);
            *row = merged;
        }
        SparseMatrix { nrows, ncols, rows }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, v)| (i, j, v)))
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_iterator(
            self.nrows,
            self.rows
                .iter()
                .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                out[j] += v * y[i];
            }
        }
        out
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                for c in 0..x.ncols() {
                    out[(i, c)] += v * x[(j, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] += v;
        }
        out
    }

    /// Sparse product `self * other`.
    pub fn mul_sparse(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut trip = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for &(k, a) in r {
                for &(j, b) in other.row(k) {
                    trip.push((i, j, a * b));
                }
            }
        }
        SparseMatrix::from_triplets(self.nrows, other.ncols, &trip)
    }

    /// Columns with at least one stored entry.
    pub fn active_columns(&self) -> Vec<usize> {
        let mut seen = vec![false; self.ncols];
        for (_, j, _) in self.triplets() {
            seen[j] = true;
        }
        (0..self.ncols).filter(|&j| seen[j]).collect()
    }

    pub fn max_abs_diff(&self, dense: &DMatrix<f64>) -> f64 {
        (self.to_dense() - dense).amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_zeros_dropped() {
        let m = SparseMatrix::from_triplets(2, 3, &[(0, 1, 1.0), (0, 1, 2.0), (1, 2, 1.0), (1, 2, -1.0)]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.to_dense()[(0, 1)], 3.0);
    }

    #[test]
    fn products_agree_with_dense() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, -2.0), (1, 1, 4.0)]);
        let b = SparseMatrix::from_triplets(3, 2, &[(0, 1, 3.0), (2, 0, 1.5), (1, 0, 0.5)]);
        let dense = a.to_dense() * b.to_dense();
        assert_eq!(a.mul_sparse(&b).to_dense(), dense);
        let x = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        assert_eq!(a.mul_vec(&x), a.to_dense() * &x);
        let y = DVector::from_vec(vec![0.5, 2.0]);
        assert_eq!(a.tr_mul_vec(&y), a.to_dense().transpose() * &y);
    }
}
