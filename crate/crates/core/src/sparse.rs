//! Compressed symmetric storage for the assembled penalty matrix.

use std::io::Write;
use std::path::Path;

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::data::atomic_write;
use crate::error::{Error, Result};

/// Square symmetric matrix in CSR form with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymmetricCsr {
    /// Sums duplicate `(row, col, value)` entries in input order.
    ///
    /// The caller is responsible for supplying a symmetric set of entries.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        // stable, so duplicates accumulate in the order they were produced
        entries.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
            } else {
                row_ptr[r + 1] += 1;
                cols.push(c);
                vals.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of one row.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn quadratic(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Maximum absolute row sum; bounds the spectral radius.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n, self.n);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
        }
        m
    }

    /// `diag(shift) + scale * self` as a faer matrix; the diagonal is always present.
    pub(crate) fn shifted(&self, shift: &[f64], scale: f64) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.nnz() + self.n);
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            let mut saw_diag = false;
            for (&c, &v) in cols.iter().zip(vals) {
                let mut value = scale * v;
                if c == r {
                    value += shift[r];
                    saw_diag = true;
                }
                trips.push(Triplet::new(r, c, value));
            }
            if !saw_diag {
                trips.push(Triplet::new(r, r, shift[r]));
            }
        }
        SparseColMat::try_new_from_triplets(self.n, self.n, &trips)
            .map_err(|e| Error::InvalidArgument(format!("sparse assembly failed: {e:?}")))
    }

    /// Writes one `row col value` line per stored entry.
    pub fn write_coordinate(&self, path: &Path) -> Result<()> {
        atomic_write(path, |out| {
            writeln!(out, "% {} {} {}", self.n, self.n, self.nnz())
                .map_err(|e| Error::io(path, e))?;
            for (r, c, v) in self.iter() {
                writeln!(out, "{r} {c} {v:e}").map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SymmetricCsr {
        SymmetricCsr::from_triplets(
            3,
            vec![
                (0, 0, 2.0),
                (1, 0, -1.0),
                (0, 1, -1.0),
                (1, 1, 2.0),
                (1, 1, 0.5),
                (2, 2, 1.0),
            ],
        )
    }

    #[test]
    fn duplicates_are_summed() {
        let m = sample();
        assert_eq!(m.get(1, 1), 2.5);
        assert_eq!(m.nnz(), 5);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn matvec_matches_dense() {
        let m = sample();
        let x = [1.0, -2.0, 3.0];
        let dense = m.to_dense();
        let want: Vec<f64> = (0..3)
            .map(|r| (0..3).map(|c| dense[(r, c)] * x[c]).sum())
            .collect();
        assert_eq!(m.matvec(&x), want);
        assert_eq!(m.trace(), 5.5);
        assert_eq!(m.norm_inf(), 3.5);
    }

    #[test]
    fn coordinate_dump() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.coo");
        sample().write_coordinate(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("% 3 3 5"));
    }
}
