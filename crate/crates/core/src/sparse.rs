//! Compressed sparse row matrices.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// column indices come out sorted.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut per_row: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); rows];
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            *per_row[r].entry(c).or_insert(0.0) += v;
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in per_row {
            for (c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds from per-row sorted `(col, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let n = rows.len();
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: n,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Sparse view of a dense matrix, keeping every entry whose magnitude is
    /// above `drop_tol`.
    pub fn from_dense(a: ArrayView2<f64>, drop_tol: f64) -> Self {
        let rows = (0..a.nrows())
            .map(|i| {
                a.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > drop_tol)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self::from_rows(a.ncols(), rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row_indices(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_indices(i)
            .iter()
            .copied()
            .zip(self.row_values(i).iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let idx = self.row_indices(i);
        match idx.binary_search(&j) {
            Ok(p) => self.row_values(i)[p],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row_indices(i).binary_search(&j).is_ok()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        Array1::from_iter((0..self.rows).map(|i| self.row_values(i).iter().sum()))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn matvec(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.cols {
            return Err(shape_err!("matvec: vector length {} vs {} columns", x.len(), self.cols));
        }
        Ok(Array1::from_iter((0..self.rows).map(|i| {
            self.row(i).map(|(j, v)| v * x[j]).sum::<f64>()
        })))
    }

    pub fn matmul_dense(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols {
            return Err(shape_err!("matmul: {} rows vs {} columns", x.nrows(), self.cols));
        }
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for i in 0..self.rows {
            let mut dst = out.row_mut(i);
            for (j, v) in self.row(i) {
                dst.scaled_add(v, &x.row(j));
            }
        }
        Ok(out)
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != other.rows {
            return Err(shape_err!(
                "sparse matmul: {}x{} times {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        let mut rows = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let mut cols_hit = Vec::new();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if !touched[j] {
                        touched[j] = true;
                        cols_hit.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            cols_hit.sort_unstable();
            let row: Vec<(usize, f64)> = cols_hit
                .iter()
                .map(|&j| {
                    let v = acc[j];
                    acc[j] = 0.0;
                    touched[j] = false;
                    (j, v)
                })
                .collect();
            rows.push(row);
        }
        Ok(CsrMatrix::from_rows(other.cols, rows))
    }

    /// `diag(left) · self · diag(right)`.
    pub fn scale(&self, left: ArrayView1<f64>, right: ArrayView1<f64>) -> CsrMatrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out.values[p] *= left[i] * right[self.indices[p]];
            }
        }
        out
    }

    /// `alpha·self + beta·other`.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> Result<CsrMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err!("sparse add: shapes differ"));
        }
        let rows = (0..self.rows)
            .map(|i| {
                let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
                for (j, v) in self.row(i) {
                    *merged.entry(j).or_insert(0.0) += alpha * v;
                }
                for (j, v) in other.row(i) {
                    *merged.entry(j).or_insert(0.0) += beta * v;
                }
                merged.into_iter().collect()
            })
            .collect();
        Ok(CsrMatrix::from_rows(self.cols, rows))
    }

    /// Largest `|a_ij - a_ji|` over stored entries; `INFINITY` if the
    /// sparsity pattern itself is asymmetric.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                if !self.contains(j, i) {
                    return f64::INFINITY;
                }
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Principal submatrix on `ids` (in the given order).
    pub fn submatrix(&self, ids: &[usize]) -> Array2<f64> {
        let m = ids.len();
        let mut pos = std::collections::HashMap::with_capacity(m);
        for (p, &id) in ids.iter().enumerate() {
            pos.insert(id, p);
        }
        let mut out = Array2::zeros((m, m));
        for (p, &id) in ids.iter().enumerate() {
            for (j, v) in self.row(id) {
                if let Some(&q) = pos.get(&j) {
                    out[[p, q]] = v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 1.0)]);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn sparse_product_matches_dense() {
        let a = array![[1.0, 2.0, 0.0], [0.0, 1.0, 3.0], [4.0, 0.0, 0.0]];
        let s = CsrMatrix::from_dense(a.view(), 0.0);
        let p = s.matmul(&s).unwrap().to_dense();
        assert_eq!(p, a.dot(&a));
        let v = s.matvec(array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(v, array![3.0, 4.0, 4.0]);
    }

    #[test]
    fn submatrix_keeps_order() {
        let a = array![[1.0, 2.0, 0.0], [2.0, 1.0, 3.0], [0.0, 3.0, 5.0]];
        let s = CsrMatrix::from_dense(a.view(), 0.0);
        let sub = s.submatrix(&[2, 1]);
        assert_eq!(sub, array![[5.0, 3.0], [3.0, 1.0]]);
        assert_eq!(s.asymmetry(), 0.0);
    }
}
