use std::io::{self, Write};

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64 as c64;
use rayon::prelude::*;

/// Square compressed-sparse-row matrix with complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<c64>,
}

impl CsrMatrix {
    /// Builds the matrix from `(row, col, value)` entries, summing duplicates.
    /// Duplicates are summed in the order they appear, so identical input
    /// yields bit-identical output.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, c64)>) -> Self {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(entries.len() / 4);
        let mut values: Vec<c64> = Vec::with_capacity(entries.len() / 4);
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < n && c < n, "entry ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            indptr[r + 1] += indptr[r];
        }
        Self { n, indptr, indices, values }
    }

    pub fn from_diagonal(diag: &[c64]) -> Self {
        Self::from_triplets(diag.len(), diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn from_dense(rows: &[Vec<c64>]) -> Self {
        let n = rows.len();
        let mut entries = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n);
            for (c, &v) in row.iter().enumerate() {
                if v != c64::new(0.0, 0.0) {
                    entries.push((r, c, v));
                }
            }
        }
        Self::from_triplets(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, c64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> c64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => c64::new(0.0, 0.0),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, c64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn mul_vec(&self, x: &[c64]) -> Vec<c64> {
        let mut y = vec![c64::new(0.0, 0.0); self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[c64], y: &mut [c64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.par_iter_mut().with_min_len(4096).enumerate().for_each(|(r, yr)| {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        });
    }

    /// Product with every column of a dense block.
    pub fn mul_mat(&self, x: &Mat<c64>) -> Mat<c64> {
        assert_eq!(x.nrows(), self.n);
        let mut y = Mat::<c64>::zeros(self.n, x.ncols());
        for j in 0..x.ncols() {
            let col = x.col(j).try_as_col_major().unwrap().as_slice();
            let out = y.col_mut(j).try_as_col_major_mut().unwrap().as_slice_mut();
            self.mul_vec_into(col, out);
        }
        y
    }

    /// `x^H A x`.
    pub fn quadratic_form(&self, x: &[c64]) -> c64 {
        let ax = self.mul_vec(x);
        x.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `||A - A^H||_F / ||A||_F`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut acc = 0.0;
        for (r, c, v) in self.entries() {
            acc += (v - self.get(c, r).conj()).norm_sqr();
        }
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            0.0
        } else {
            acc.sqrt() / norm
        }
    }

    pub fn diagonal(&self) -> Vec<c64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn sum_entries(&self) -> c64 {
        self.values.iter().sum()
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: c64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let entries = self
            .entries()
            .chain(other.entries().map(|(r, c, v)| (r, c, alpha * v)))
            .collect();
        Self::from_triplets(self.n, entries)
    }

    /// Principal submatrix on the kept indices, in the given order.
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut new_index = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            new_index[i] = k;
        }
        let mut entries = Vec::new();
        for (k, &r) in keep.iter().enumerate() {
            for (c, v) in self.row(r) {
                if new_index[c] != usize::MAX {
                    entries.push((k, new_index[c], v));
                }
            }
        }
        Self::from_triplets(keep.len(), entries)
    }

    pub fn to_faer(&self) -> SparseColMat<usize, c64> {
        let triplets: Vec<_> = self.entries().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .expect("valid sparse structure")
    }

    pub fn to_dense(&self) -> Mat<c64> {
        let mut m = Mat::<c64>::zeros(self.n, self.n);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    /// Coordinate dump, one `row col re im` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (r, c, v) in self.entries() {
            writeln!(w, "{r} {c} {:e} {:e}", v.re, v.im)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> c64 {
        c64::new(re, im)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(
            2,
            vec![(1, 0, c(1.0, 0.0)), (0, 0, c(2.0, 0.0)), (1, 0, c(0.5, 1.0))],
        );
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 0), c(1.5, 1.0));
        assert_eq!(m.get(0, 1), c(0.0, 0.0));
    }

    #[test]
    fn hermitian_defect_detects_asymmetry() {
        let h = CsrMatrix::from_dense(&[vec![c(2.0, 0.0), c(1.0, 1.0)], vec![c(1.0, -1.0), c(3.0, 0.0)]]);
        assert_eq!(h.hermitian_defect(), 0.0);
        let nh = CsrMatrix::from_dense(&[vec![c(2.0, 0.0), c(1.0, 1.0)], vec![c(1.0, 1.0), c(3.0, 0.0)]]);
        assert!(nh.hermitian_defect() > 0.1);
    }

    #[test]
    fn coo_dump_lists_entries() {
        let m = CsrMatrix::from_diagonal(&[c(1.0, 0.0), c(0.0, -2.0)]);
        let mut out = Vec::new();
        m.write_coo(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "0 0 1e0 0e0\n1 1 0e0 -2e0\n");
    }

    #[test]
    fn submatrix_keeps_order() {
        let m = CsrMatrix::from_dense(&[
            vec![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)],
            vec![c(4.0, 0.0), c(5.0, 0.0), c(6.0, 0.0)],
            vec![c(7.0, 0.0), c(8.0, 0.0), c(9.0, 0.0)],
        ]);
        let s = m.principal_submatrix(&[2, 0]);
        assert_eq!(s.get(0, 0), c(9.0, 0.0));
        assert_eq!(s.get(0, 1), c(7.0, 0.0));
        assert_eq!(s.get(1, 0), c(3.0, 0.0));
    }
}
