//! Compressed-row sparse matrices used for the per-behavior adjacency.

use rayon::prelude::*;

use crate::error::{CmlError, Result};
use crate::tensor::Tensor;

const PAR_ROWS: usize = 256;

/// CSR matrix with unique, non-negative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from coordinate triples. Duplicates, out-of-range coordinates and
    /// negative or non-finite values are rejected.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = entries.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(CmlError::Shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(CmlError::Data(format!(
                    "adjacency weight at ({r}, {c}) must be finite and non-negative, got {v}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(CmlError::Data(format!("duplicate entry at ({r}, {c})")));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = cursor[c];
                indices[slot] = r;
                values[slot] = v;
                cursor[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            out.set(r, c, v);
        }
        out
    }

    /// Same sparsity pattern with every value replaced by `f(row, col, value)`.
    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> SparseMatrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] = f(r, self.indices[p], self.values[p]);
            }
        }
        out
    }

    /// Sparse-dense product `self · dense`.
    pub fn spmm(&self, dense: &Tensor) -> Result<Tensor> {
        if self.cols != dense.rows() {
            return Err(CmlError::Shape(format!(
                "spmm of {}x{} sparse by {:?} dense: inner dimensions differ",
                self.rows,
                self.cols,
                dense.shape()
            )));
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(self.rows, n);
        if n == 0 {
            return Ok(out);
        }
        out.data_mut()
            .par_chunks_mut(n * PAR_ROWS)
            .enumerate()
            .for_each(|(chunk, block)| {
                for (local, orow) in block.chunks_mut(n).enumerate() {
                    let (cols, vals) = self.row(chunk * PAR_ROWS + local);
                    for (&c, &v) in cols.iter().zip(vals) {
                        for (o, &d) in orow.iter_mut().zip(dense.row(c)) {
                            *o += v * d;
                        }
                    }
                }
            });
        Ok(out)
    }

    /// `selfᵀ · dense`, computed by scattering rows. Serial, so the summation
    /// order is fixed.
    pub fn t_spmm(&self, dense: &Tensor) -> Result<Tensor> {
        if self.rows != dense.rows() {
            return Err(CmlError::Shape(format!(
                "transposed spmm of {}x{} sparse by {:?} dense: row counts differ",
                self.rows,
                self.cols,
                dense.shape()
            )));
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(self.cols, n);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let drow = dense.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &d) in out.row_mut(c).iter_mut().zip(drow) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut entries = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen_bool(density) {
                    entries.push((r, c, rng.gen_range(0.0..2.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, &entries).unwrap()
    }

    #[test]
    fn empty_times_dense_is_zero() {
        let s = SparseMatrix::empty(3, 2);
        let d = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(s.spmm(&d).unwrap(), Tensor::zeros(3, 2));
    }

    #[test]
    fn single_entry_selects_row() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0)]).unwrap();
        let d = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let out = s.spmm(&d).unwrap();
        assert_eq!(out.row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn spmm_matches_densified_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for size in [10usize, 23, 50] {
            let s = random_sparse(&mut rng, size, size, 0.2);
            let d = Tensor::xavier_uniform(size, 6, &mut rng);
            let sparse = s.spmm(&d).unwrap();
            let dense = s.to_dense().matmul(&d).unwrap();
            for (a, b) in sparse.data().iter().zip(dense.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn t_spmm_matches_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_sparse(&mut rng, 9, 5, 0.4);
        let d = Tensor::xavier_uniform(9, 3, &mut rng);
        let a = s.t_spmm(&d).unwrap();
        let b = s.transpose().spmm(&d).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_sparse(&mut rng, 7, 11, 0.3);
        assert_eq!(s.transpose().to_dense(), s.to_dense().transpose());
        assert_eq!(s.transpose().transpose(), s);
    }

    #[test]
    fn rejects_duplicates_and_bad_coordinates() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_triplets(2, 2, &[(0, 0, -1.0)]).is_err());
    }

    #[test]
    fn spmm_dimension_mismatch() {
        let s = SparseMatrix::empty(2, 3);
        assert!(s.spmm(&Tensor::zeros(2, 2)).is_err());
    }
}
