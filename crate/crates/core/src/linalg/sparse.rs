use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed-sparse-row matrix of `f64`.
///
/// Column indices are strictly increasing within each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets in any order. Repeated
    /// coordinates are summed; coordinates whose sum is exactly zero are
    /// not stored.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut entries = triplets.to_vec();
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at ({r}, {c})")));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));

        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut rows_of = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                rows_of.push(r);
                col_indices.push(c);
                values.push(v);
            }
        }
        for &r in &rows_of {
            row_offsets[r + 1] += 1;
        }
        for i in 0..rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::Data(format!("invalid CSR: {msg}")));
        if row_offsets.len() != rows + 1 || row_offsets[0] != 0 {
            return bad(format!("row_offsets has {} entries", row_offsets.len()));
        }
        if col_indices.len() != values.len() || *row_offsets.last().unwrap() != values.len() {
            return bad("nnz disagrees between arrays".into());
        }
        for i in 0..rows {
            let (lo, hi) = (row_offsets[i], row_offsets[i + 1]);
            if lo > hi {
                return bad(format!("row_offsets decreases at row {i}"));
            }
            let cs = &col_indices[lo..hi];
            if cs.iter().any(|&c| c >= cols) || cs.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} columns out of range or unsorted"));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn density(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.rows as f64 * self.cols as f64)
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        self.col_indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Iterates over all stored `(row, col, value)` entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        match self.col_indices[lo..hi].binary_search(&j) {
            Ok(p) => self.values[lo + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.triplets() {
            d.set(i, j, v);
        }
        d
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest `|a_ij - a_ji|` over all entries (infinite when not square).
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - self.get(j, i)).abs());
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self + shift * I` for square matrices.
    pub fn add_diagonal(&self, shift: f64) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape(
                "add_diagonal",
                format!("{:?} is not square", self.shape()),
            ));
        }
        let mut trip: Vec<_> = self.triplets().collect();
        trip.extend((0..self.rows).map(|i| (i, i, shift)));
        Self::from_triplets(self.rows, self.cols, &trip)
    }

    /// Elementwise map over stored values; zeros produced by `f` are dropped.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (i, j, f(v))).collect();
        Self::from_triplets(self.rows, self.cols, &trip)
    }
}

/// Exact sparse-times-dense product `s * d`.
pub fn spmm(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    if s.cols != d.rows() {
        return Err(Error::shape(
            "spmm",
            format!("{:?} x {:?}", s.shape(), d.shape()),
        ));
    }
    let m = d.cols();
    let mut out = DenseMatrix::zeros(s.rows, m);
    for i in 0..s.rows {
        let orow = out.row_mut(i);
        for (j, v) in s.row(i) {
            for (o, &x) in orow.iter_mut().zip(d.row(j)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// `sᵀ * d` computed by scattering rows of `d`; no transpose is materialized.
pub fn spmm_transposed(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    if s.rows != d.rows() {
        return Err(Error::shape(
            "spmm_transposed",
            format!("{:?}ᵀ x {:?}", s.shape(), d.shape()),
        ));
    }
    let m = d.cols();
    let mut out = DenseMatrix::zeros(s.cols, m);
    for i in 0..s.rows {
        let drow = d.row(i);
        for (j, v) in s.row(i) {
            for (o, &x) in out.row_mut(j).iter_mut().zip(drow) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Keeps entries with `|value| >= threshold`; every other entry is dropped.
/// Exact zeros are never stored, including at `threshold = 0`.
pub fn sparsify(d: &DenseMatrix, threshold: f64) -> Result<SparseMatrix> {
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!(
            "sparsify threshold must be >= 0, got {threshold}"
        )));
    }
    let mut row_offsets = Vec::with_capacity(d.rows() + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    for i in 0..d.rows() {
        for (j, &v) in d.row(i).iter().enumerate() {
            if v != 0.0 && v.abs() >= threshold {
                col_indices.push(j);
                values.push(v);
            }
        }
        row_offsets.push(values.len());
    }
    Ok(SparseMatrix {
        rows: d.rows(),
        cols: d.cols(),
        row_offsets,
        col_indices,
        values,
    })
}

pub fn transpose_sparse(s: &SparseMatrix) -> SparseMatrix {
    let mut counts = vec![0usize; s.cols + 1];
    for &c in &s.col_indices {
        counts[c + 1] += 1;
    }
    for j in 0..s.cols {
        counts[j + 1] += counts[j];
    }
    let row_offsets = counts.clone();
    let mut next = counts;
    let mut col_indices = vec![0usize; s.nnz()];
    let mut values = vec![0.0; s.nnz()];
    // Rows are visited in increasing order, so each output row stays sorted.
    for i in 0..s.rows {
        for (j, v) in s.row(i) {
            let p = next[j];
            col_indices[p] = i;
            values[p] = v;
            next[j] += 1;
        }
    }
    SparseMatrix {
        rows: s.cols,
        cols: s.rows,
        row_offsets,
        col_indices,
        values,
    }
}
