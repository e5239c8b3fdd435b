//! Subspace extraction from sampled checkpoints and the projection /
//! reconstruction kernels used for coefficient training.
//!
//! Extraction decentralizes and normalizes each checkpoint per layer group:
//! the group center is the mean of the sampled weights and each basis column
//! is `(w_i - center) / ||w_i - center||`. Columns are *not* orthogonalized
//! by default; a classical sequential Gram-Schmidt pass is available as the
//! (much slower) comparator. Because the decentered directions always sum to
//! zero, a basis with n columns spans at most n-1 dimensions; with n = 2 the
//! two columns are exactly collinear. Rank deficiency is harmless for
//! gradient projection and is exercised by the tests.
//!
//! A checkpoint whose group slice coincides with the center has no direction
//! to contribute; its column is stored as the zero vector and flagged, which
//! keeps column indices aligned with checkpoint indices.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{write_weights_file, CheckpointSet};
use crate::error::{Result, TwaError};
use crate::params::{dot, norm2, DenseMatrix, LayerPartition, ParamVector};

/// Trainable subspace coordinates: one real vector per layer group, sized to
/// that group's basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub blocks: Vec<Vec<f64>>,
}

impl Coefficients {
    pub fn zeros_for(basis: &SubspaceBasis) -> Self {
        Self {
            blocks: basis
                .blocks
                .iter()
                .map(|b| vec![0.0; b.cols()])
                .collect(),
        }
    }

    pub fn norm2(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// Per-group gradient coefficients together with the projected gradient.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coeff_grads: Vec<Vec<f64>>,
    pub projected: ParamVector,
}

/// Center vector plus per-group projection blocks extracted from a
/// checkpoint set. Immutable once built.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    partition: LayerPartition,
    centers: Vec<ParamVector>,
    blocks: Vec<DenseMatrix>,
    degenerate: Vec<Vec<bool>>,
    n: usize,
    orthogonalized: bool,
}

const DEGENERATE_REL_TOL: f64 = 1e-12;
const GRAM_SCHMIDT_DROP_TOL: f64 = 1e-10;

/// `(||v - center||, ||v||)` with four independent accumulators per sum so
/// the reduction is not one long dependency chain. The lane layout is fixed,
/// so the result does not depend on scheduling.
fn group_norms(v: &[f64], center: &[f64]) -> (f64, f64) {
    let mut diff = [0.0f64; 4];
    let mut mag = [0.0f64; 4];
    let main = v.len() - v.len() % 4;
    for (vs, cs) in v[..main].chunks_exact(4).zip(center[..main].chunks_exact(4)) {
        for l in 0..4 {
            let dv = vs[l] - cs[l];
            diff[l] += dv * dv;
            mag[l] += vs[l] * vs[l];
        }
    }
    for (vi, ci) in v[main..].iter().zip(&center[main..]) {
        let dv = vi - ci;
        diff[0] += dv * dv;
        mag[0] += vi * vi;
    }
    let diff_sq = (diff[0] + diff[1]) + (diff[2] + diff[3]);
    let mag_sq = (mag[0] + mag[1]) + (mag[2] + mag[3]);
    (diff_sq.sqrt(), mag_sq.sqrt())
}

impl SubspaceBasis {
    /// Decentralize-and-normalize extraction over in-memory weights.
    pub fn extract_from_weights(
        weights: &[ParamVector],
        partition: LayerPartition,
    ) -> Result<Self> {
        let n = weights.len();
        if n < 2 {
            return Err(TwaError::Input(format!(
                "subspace extraction needs at least 2 checkpoints, got {n}"
            )));
        }
        let d = partition.total_len();
        for (i, w) in weights.iter().enumerate() {
            if w.len() != d {
                return Err(TwaError::Dimension(format!(
                    "checkpoint {i} has length {}, partition covers {d}",
                    w.len()
                )));
            }
        }

        let mut centers = Vec::with_capacity(partition.num_groups());
        let mut blocks = Vec::with_capacity(partition.num_groups());
        let mut degenerate = Vec::with_capacity(partition.num_groups());
        let mut any_direction = false;

        // Rows per parallel task in the fill pass, sized so one task's output
        // window stays in L2 while all n strided column writes pass over it.
        // Outputs are disjoint row ranges and every per-weight sum stays
        // sequential, so results are bit-identical for any worker count.
        const ROW_CHUNK: usize = 1024;
        const CENTER_CHUNK: usize = 16 * 1024;

        for range in partition.ranges() {
            let glen = range.len();
            let mut center = vec![0.0; glen];
            center
                .par_chunks_mut(CENTER_CHUNK)
                .enumerate()
                .for_each(|(chunk, dst)| {
                    let start = range.start + chunk * CENTER_CHUNK;
                    let inv_n = 1.0 / n as f64;
                    for w in weights {
                        let src = &w[start..start + dst.len()];
                        for (c, v) in dst.iter_mut().zip(src) {
                            *c += v;
                        }
                    }
                    for c in dst.iter_mut() {
                        *c *= inv_n;
                    }
                });
            let center_norm = norm2(&center);

            let norms: Vec<(f64, f64)> = weights
                .par_iter()
                .map(|w| group_norms(&w[range.clone()], &center))
                .collect();
            let mut inv_norms = vec![0.0; n];
            let mut degen = vec![false; n];
            for (i, &(diff_norm, w_norm)) in norms.iter().enumerate() {
                let tol = DEGENERATE_REL_TOL * center_norm.max(w_norm);
                if diff_norm <= tol {
                    degen[i] = true;
                } else {
                    inv_norms[i] = 1.0 / diff_norm;
                    any_direction = true;
                }
            }

            let mut block = DenseMatrix::zeros(glen, n);
            block
                .data_mut()
                .par_chunks_mut(ROW_CHUNK * n)
                .enumerate()
                .for_each(|(chunk, data)| {
                    let row0 = chunk * ROW_CHUNK;
                    let rows = data.len() / n;
                    let center = &center[row0..row0 + rows];
                    for (i, w) in weights.iter().enumerate() {
                        let scale = inv_norms[i];
                        let src = &w[range.start + row0..range.start + row0 + rows];
                        let dst = data[i..].iter_mut().step_by(n);
                        for ((o, v), c) in dst.zip(src).zip(center) {
                            *o = (v - c) * scale;
                        }
                    }
                });

            centers.push(ParamVector::from_raw(center));
            blocks.push(block);
            degenerate.push(degen);
        }

        if !any_direction {
            return Err(TwaError::Input(
                "zero spread: every checkpoint equals the center in every group".into(),
            ));
        }

        Ok(Self {
            partition,
            centers,
            blocks,
            degenerate,
            n,
            orthogonalized: false,
        })
    }

    /// Extraction straight from a checkpoint set on disk.
    pub fn extract(set: &CheckpointSet, partition: LayerPartition) -> Result<Self> {
        if partition.total_len() != set.d {
            return Err(TwaError::Dimension(format!(
                "partition covers {} parameters, checkpoints store {}",
                partition.total_len(),
                set.d
            )));
        }
        let weights = set.load_weights()?;
        Self::extract_from_weights(&weights, partition)
    }

    /// Builds a basis from explicit parts. Every column must have unit
    /// 2-norm (within 1e-12) or be exactly zero; zero columns are flagged
    /// degenerate.
    pub fn from_parts(
        partition: LayerPartition,
        centers: Vec<ParamVector>,
        blocks: Vec<DenseMatrix>,
        orthogonalized: bool,
    ) -> Result<Self> {
        let groups = partition.num_groups();
        if centers.len() != groups || blocks.len() != groups {
            return Err(TwaError::Dimension(format!(
                "{} centers / {} blocks for {groups} groups",
                centers.len(),
                blocks.len()
            )));
        }
        let mut n = None;
        let mut degenerate = Vec::with_capacity(groups);
        for (r, range) in partition.ranges().enumerate() {
            if centers[r].len() != range.len() || blocks[r].rows() != range.len() {
                return Err(TwaError::Dimension(format!(
                    "group {r} covers {} parameters, center has {} and block has {} rows",
                    range.len(),
                    centers[r].len(),
                    blocks[r].rows()
                )));
            }
            match n {
                None => n = Some(blocks[r].cols()),
                Some(cols) if cols != blocks[r].cols() => {
                    return Err(TwaError::Dimension(
                        "all groups must carry the same column count".into(),
                    ))
                }
                _ => {}
            }
            let mut degen = Vec::with_capacity(blocks[r].cols());
            for c in 0..blocks[r].cols() {
                let nrm = norm2(&blocks[r].column(c));
                if nrm == 0.0 {
                    degen.push(true);
                } else if (nrm - 1.0).abs() <= 1e-12 {
                    degen.push(false);
                } else {
                    return Err(TwaError::Input(format!(
                        "group {r} column {c} has norm {nrm}, expected 1 or 0"
                    )));
                }
            }
            degenerate.push(degen);
        }
        Ok(Self {
            partition,
            centers,
            blocks,
            degenerate,
            n: n.unwrap_or(0),
            orthogonalized,
        })
    }

    /// Classical sequential Gram-Schmidt over each group's columns.
    /// Degenerate columns and columns whose residual norm falls below
    /// `1e-10` of their original norm are dropped, so groups may end up with
    /// fewer columns. Consumes the basis; cost is quadratic in the column
    /// count where extraction is linear.
    pub fn gram_schmidt(self) -> SubspaceBasis {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut degenerate = Vec::with_capacity(self.blocks.len());
        for (block, degen) in self.blocks.into_iter().zip(self.degenerate) {
            let rows = block.rows();
            let mut qs: Vec<Vec<f64>> = Vec::new();
            for (j, &is_degenerate) in degen.iter().enumerate() {
                if is_degenerate {
                    continue;
                }
                let v = block.column(j);
                let orig = norm2(&v);
                if orig == 0.0 {
                    continue;
                }
                // classical form: every coefficient comes from the original
                // column, not the running residual
                let coeffs: Vec<f64> = qs.iter().map(|q| dot(q, &v)).collect();
                let mut u = v;
                for (q, c) in qs.iter().zip(&coeffs) {
                    for (ui, qi) in u.iter_mut().zip(q) {
                        *ui -= c * qi;
                    }
                }
                let nrm = norm2(&u);
                if nrm < GRAM_SCHMIDT_DROP_TOL * orig {
                    continue;
                }
                for ui in &mut u {
                    *ui /= nrm;
                }
                qs.push(u);
            }
            degenerate.push(vec![false; qs.len()]);
            blocks.push(
                DenseMatrix::from_columns(rows, &qs).expect("columns share the group length"),
            );
        }
        SubspaceBasis {
            partition: self.partition,
            centers: self.centers,
            blocks,
            degenerate,
            n: self.n,
            orthogonalized: true,
        }
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn num_groups(&self) -> usize {
        self.blocks.len()
    }

    /// Checkpoint count the basis was extracted from.
    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn orthogonalized(&self) -> bool {
        self.orthogonalized
    }

    pub fn block(&self, r: usize) -> &DenseMatrix {
        &self.blocks[r]
    }

    pub fn center(&self, r: usize) -> &ParamVector {
        &self.centers[r]
    }

    pub fn degenerate_flags(&self, r: usize) -> &[bool] {
        &self.degenerate[r]
    }

    pub fn columns_in_group(&self, r: usize) -> usize {
        self.blocks[r].cols()
    }

    pub fn total_columns(&self) -> usize {
        self.blocks.iter().map(DenseMatrix::cols).sum()
    }

    /// Parameter count `D`.
    pub fn dim(&self) -> usize {
        self.partition.total_len()
    }

    /// Concatenated group centers; with coefficients at zero this is the
    /// plain checkpoint average.
    pub fn centers_vector(&self) -> ParamVector {
        let mut out = vec![0.0; self.dim()];
        for (range, center) in self.partition.ranges().zip(&self.centers) {
            out[range].copy_from_slice(center);
        }
        ParamVector::from_raw(out)
    }

    /// Per-group coefficient gradients `P^(r)T g^(r)`.
    pub fn coeff_gradients(&self, g: &ParamVector) -> Result<Vec<Vec<f64>>> {
        if g.len() != self.dim() {
            return Err(TwaError::Dimension(format!(
                "gradient has length {}, basis covers {}",
                g.len(),
                self.dim()
            )));
        }
        self.partition
            .ranges()
            .zip(&self.blocks)
            .map(|(range, block)| block.matvec_t(&g[range]))
            .collect()
    }

    /// Projects a gradient: coefficient blocks `P^T g` and their embedding
    /// `P (P^T g)` back in parameter space, group by group.
    pub fn project(&self, g: &ParamVector) -> Result<Projection> {
        let coeff_grads = self.coeff_gradients(g)?;
        let mut projected = vec![0.0; self.dim()];
        for ((range, block), cg) in self.partition.ranges().zip(&self.blocks).zip(&coeff_grads) {
            let proj = block.matvec(cg)?;
            projected[range].copy_from_slice(&proj);
        }
        Ok(Projection {
            coeff_grads,
            projected: ParamVector::from_raw(projected),
        })
    }

    /// Affine reconstruction `center + P X`, group by group.
    pub fn reconstruct(&self, x: &Coefficients) -> Result<ParamVector> {
        if x.blocks.len() != self.num_groups() {
            return Err(TwaError::Dimension(format!(
                "{} coefficient blocks for {} groups",
                x.blocks.len(),
                self.num_groups()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (r, range) in self.partition.ranges().enumerate() {
            let y = self.blocks[r].matvec(&x.blocks[r])?;
            let dst = &mut out[range];
            for ((o, yi), ci) in dst.iter_mut().zip(&y).zip(self.centers[r].iter()) {
                *o = yi + ci;
            }
        }
        Ok(ParamVector::from_raw(out))
    }

    /// Norm of the least-squares residual of `v - centers` against the basis
    /// columns, accumulated over groups. Zero (up to rounding) exactly when
    /// `v` lies in the affine span.
    pub fn span_residual(&self, v: &ParamVector) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(TwaError::Dimension(format!(
                "vector has length {}, basis covers {}",
                v.len(),
                self.dim()
            )));
        }
        let mut total_sq = 0.0;
        for (r, range) in self.partition.ranges().enumerate() {
            let shifted: Vec<f64> = v[range]
                .iter()
                .zip(self.centers[r].iter())
                .map(|(a, c)| a - c)
                .collect();
            let res = self.blocks[r].lstsq_residual_norm(&shifted)?;
            total_sq += res * res;
        }
        Ok(total_sq.sqrt())
    }

    /// Checks the structural invariants: unit (or flagged-zero) columns, and
    /// pairwise orthogonality when the basis is marked orthogonalized.
    pub fn check_invariants(&self) -> Result<()> {
        for (r, block) in self.blocks.iter().enumerate() {
            for c in 0..block.cols() {
                let col = block.column(c);
                let nrm = norm2(&col);
                if self.degenerate[r][c] {
                    if nrm != 0.0 {
                        return Err(TwaError::Numeric(format!(
                            "group {r} column {c} is flagged degenerate but has norm {nrm}"
                        )));
                    }
                } else if (nrm - 1.0).abs() > 1e-12 {
                    return Err(TwaError::Numeric(format!(
                        "group {r} column {c} has norm {nrm}"
                    )));
                }
            }
            if self.orthogonalized {
                for a in 0..block.cols() {
                    let ca = block.column(a);
                    for b in a + 1..block.cols() {
                        let d = dot(&ca, &block.column(b)).abs();
                        if d >= 1e-8 {
                            return Err(TwaError::Numeric(format!(
                                "group {r} columns {a},{b} have dot {d}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes every basis column as a `TWA1` file plus a JSON sidecar
    /// describing the partition.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| TwaError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (r, block) in self.blocks.iter().enumerate() {
            let name = format!("center_g{r:02}.twa1");
            write_weights_file(dir.join(name), &self.centers[r])?;
            for c in 0..block.cols() {
                let column = ParamVector::from_raw(block.column(c));
                let name = format!("basis_g{r:02}_c{c:04}.twa1");
                write_weights_file(dir.join(name), &column)?;
            }
        }
        #[derive(Serialize)]
        struct Sidecar<'a> {
            partition: &'a [usize],
            n: usize,
            orthogonalized: bool,
        }
        let sidecar = Sidecar {
            partition: self.partition.boundaries(),
            n: self.n,
            orthogonalized: self.orthogonalized,
        };
        let path = dir.join("basis.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|source| TwaError::Io { path, source })
    }
}
