//! Flat parameter vectors, layer partitioning, and the dense matrix kernels
//! behind gradient projection.
//!
//! Everything here is a plain 64-bit value type: operations never mutate
//! their inputs, and all results stay finite for finite inputs at the scales
//! this crate works at. Projection blocks are stored row-major with basis
//! vectors as columns, so `P^T g` sweeps rows sequentially.

use std::ops::{Deref, Range};

use crate::error::{Result, TwaError};

/// A flat view of all model parameters (length `D`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    /// Validates that `data` is non-empty and finite.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(TwaError::Input("parameter vector must be non-empty".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TwaError::Numeric(format!(
                "non-finite parameter entry at index {i}"
            )));
        }
        Ok(Self { data })
    }

    /// Constructor for internal results that are finite by construction.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vector length must be positive");
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(TwaError::Dimension(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a * x + y` element-wise; inputs are untouched.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    if x.len() != y.len() {
        return Err(TwaError::Dimension(format!(
            "axpy of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let data = x.iter().zip(y.iter()).map(|(xi, yi)| a * xi + yi).collect();
    Ok(ParamVector::from_raw(data))
}

/// Contiguous grouping of the flat parameter vector into `l` layer groups.
///
/// Boundaries are `l + 1` offsets starting at 0 and ending at `D`; every
/// group is non-empty and the groups tile `[0, D)` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    boundaries: Vec<usize>,
}

impl LayerPartition {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(TwaError::Input(
                "partition needs at least two boundaries".into(),
            ));
        }
        if boundaries[0] != 0 {
            return Err(TwaError::Input("partition must start at offset 0".into()));
        }
        if !boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(TwaError::Input(
                "partition boundaries must be strictly increasing".into(),
            ));
        }
        Ok(Self { boundaries })
    }

    /// Single group covering all of `[0, d)`.
    pub fn global(d: usize) -> Self {
        assert!(d > 0, "partition over empty parameter space");
        Self {
            boundaries: vec![0, d],
        }
    }

    /// `l` contiguous groups of near-equal size; the first `d % l` groups get
    /// one extra element.
    pub fn equal_groups(d: usize, l: usize) -> Result<Self> {
        if l == 0 || l > d {
            return Err(TwaError::Input(format!(
                "cannot split {d} parameters into {l} groups"
            )));
        }
        let base = d / l;
        let extra = d % l;
        let mut boundaries = Vec::with_capacity(l + 1);
        let mut offset = 0;
        boundaries.push(0);
        for r in 0..l {
            offset += base + usize::from(r < extra);
            boundaries.push(offset);
        }
        Ok(Self { boundaries })
    }

    pub fn num_groups(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Total parameter count `D`.
    pub fn total_len(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn group_range(&self, r: usize) -> Result<Range<usize>> {
        if r >= self.num_groups() {
            return Err(TwaError::IndexOutOfRange {
                index: r,
                len: self.num_groups(),
            });
        }
        Ok(self.boundaries[r]..self.boundaries[r + 1])
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }

    /// Copies out group `r` of `w`; concatenating all groups in order
    /// reconstructs `w` exactly.
    pub fn slice_group(&self, w: &ParamVector, r: usize) -> Result<ParamVector> {
        if w.len() != self.total_len() {
            return Err(TwaError::Dimension(format!(
                "vector length {} does not match partition over {}",
                w.len(),
                self.total_len()
            )));
        }
        let range = self.group_range(r)?;
        Ok(ParamVector::from_raw(w[range].to_vec()))
    }
}

/// Dense row-major matrix. Subspace blocks are laid out `D x n` with one
/// basis vector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TwaError::Dimension(format!(
                "{rows}x{cols} matrix cannot hold {} entries",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TwaError::Numeric(format!(
                "non-finite matrix entry at index {i}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers column `c` (strided read).
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Assembles a row-major matrix from column vectors. An empty column list
    /// yields a `rows x 0` matrix.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        for (i, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(TwaError::Dimension(format!(
                    "column {i} has length {}, expected {rows}",
                    col.len()
                )));
            }
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            for (j, col) in columns.iter().enumerate() {
                row[j] = col[r];
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// `P^T g`: one sequential sweep over the rows, accumulating all column
    /// coefficients at once.
    pub fn matvec_t(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.rows {
            return Err(TwaError::Dimension(format!(
                "matvec_t: vector length {} vs {} rows",
                g.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            let row = self.row(r);
            for (o, &p) in out.iter_mut().zip(row) {
                *o += p * gr;
            }
        }
        Ok(out)
    }

    /// `P x`: per-row dot products.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(TwaError::Dimension(format!(
                "matvec: vector length {} vs {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Orthonormalizes the columns by modified Gram-Schmidt with a second
    /// re-orthogonalization pass; columns that are (numerically) dependent on
    /// earlier ones are dropped. Used for least-squares checks, not as the
    /// public orthogonalization operation.
    pub(crate) fn orthonormal_columns(&self) -> DenseMatrix {
        let mut qs: Vec<Vec<f64>> = Vec::new();
        for j in 0..self.cols {
            let mut v = self.column(j);
            let orig = norm2(&v);
            if orig == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for q in &qs {
                    let c = dot(q, &v);
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= c * qi;
                    }
                }
            }
            let nrm = norm2(&v);
            if nrm <= 1e-12 * orig {
                continue;
            }
            for vi in &mut v {
                *vi /= nrm;
            }
            qs.push(v);
        }
        DenseMatrix::from_columns(self.rows, &qs).expect("orthonormal columns share row count")
    }

    /// Least-squares projection of `v` onto the column space.
    pub fn lstsq_project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(TwaError::Dimension(format!(
                "lstsq_project: vector length {} vs {} rows",
                v.len(),
                self.rows
            )));
        }
        let q = self.orthonormal_columns();
        let coeffs = q.matvec_t(v)?;
        q.matvec(&coeffs)
    }

    /// Norm of the least-squares residual of `v` against the column space.
    pub fn lstsq_residual_norm(&self, v: &[f64]) -> Result<f64> {
        let proj = self.lstsq_project(v)?;
        let sq = v
            .iter()
            .zip(&proj)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        Ok(sq.sqrt())
    }
}
