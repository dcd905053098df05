//! Compressed sparse row storage for the quadratic affinity matrix.

use nalgebra::{DMatrix, DVector};

/// Real CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed; explicit
    /// zeros are kept so the sparsity pattern stays structural.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for r in 0..dense.nrows() {
            for c in 0..dense.ncols() {
                let v = dense[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.vals[span])
    }

    /// Stored entry, or 0 outside the pattern.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).0.binary_search(&c).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Same pattern, values replaced by `f(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.vals[k] = f(r, self.col_idx[k], self.vals[k]);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            d[(r, c)] += v;
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, triplets)
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols && *self == self.transpose()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum::<f64>()
            }),
        )
    }

    /// `Aᵀ y` without materializing the transpose.
    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for (r, c, v) in self.iter() {
            out[c] += v * y[r];
        }
        out
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    /// Largest absolute row sum (Gershgorin radius bound).
    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.nrows)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Copies the matrix onto the dense target, scaled: `target += alpha * self`.
    pub fn add_to_dense(&self, target: &mut DMatrix<f64>, alpha: f64) {
        for (r, c, v) in self.iter() {
            target[(r, c)] += alpha * v;
        }
    }

    /// Rows and columns restricted to `keep` (in the given order).
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.ncols.max(self.nrows)];
        for (k, &idx) in keep.iter().enumerate() {
            pos[idx] = k;
        }
        let mut triplets = Vec::new();
        for (new_r, &r) in keep.iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if pos[c] != usize::MAX {
                    triplets.push((new_r, pos[c], v));
                }
            }
        }
        Self::from_triplets(keep.len(), keep.len(), triplets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5), (0, 0, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 0), -1.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.row(0).0, &[0, 1]);
    }

    #[test]
    fn dense_round_trip_and_products() {
        let d = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        let s = SparseMatrix::from_dense(&d);
        assert_eq!(s.to_dense(), d);
        assert!(s.is_symmetric());
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mul_vec(&x), &d * &x);
        assert_eq!(s.quad_form(&x), x.dot(&(&d * &x)));
        assert_eq!(s.tr_mul_vec(&x), d.transpose() * &x);
        assert_eq!(s.max_abs_row_sum(), 3.0);
    }

    #[test]
    fn submatrix_keeps_order() {
        let d = DMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let s = SparseMatrix::from_dense(&d);
        let sub = s.submatrix(&[3, 1]).to_dense();
        assert_eq!(sub, DMatrix::from_row_slice(2, 2, &[15.0, 13.0, 7.0, 5.0]));
    }
}
