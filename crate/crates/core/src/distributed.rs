//! Deterministic in-process simulation of multi-node gradient projection.
//!
//! The projection matrix is split column-wise into `k` contiguous sub-blocks,
//! one per node. A step runs two reduction rounds: the local gradients are
//! all-reduced to their mean, every node projects the mean through its own
//! block (`P_i P_i^T g`), and a second all-reduce sums the partial
//! projections. Block matrix multiplication makes the result equal to the
//! monolithic `P P^T g`. Reductions always accumulate in ascending node-id
//! order, so results are bit-identical regardless of whether nodes run
//! sequentially or on separate threads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TwaError};
use crate::params::{DenseMatrix, LayerPartition, ParamVector};
use crate::subspace::{Coefficients, SubspaceBasis};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    #[default]
    ContiguousColumns,
}

fn default_true() -> bool {
    true
}

/// Degree and layout of the simulated node pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributedConfig {
    pub k: usize,
    #[serde(default)]
    pub partition_strategy: PartitionStrategy,
    #[serde(default = "default_true")]
    pub deterministic_reduce: bool,
}

impl DistributedConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            partition_strategy: PartitionStrategy::ContiguousColumns,
            deterministic_reduce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TwaError::Input("node count k must be >= 1".into()));
        }
        if !self.deterministic_reduce {
            return Err(TwaError::Input(
                "only deterministic reductions are supported".into(),
            ));
        }
        Ok(())
    }
}

/// How node work is driven between the reduce barriers. Both modes must
/// produce bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeScheduling {
    Sequential,
    Threads,
}

/// One simulated node: its column slice of every group block, plus the last
/// local gradient it received.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    /// Column range this node owns within each group's block.
    pub column_ranges: Vec<Range<usize>>,
    /// The owned sub-matrices `P_i`, one per group.
    pub blocks: Vec<DenseMatrix>,
    pub local_gradient: Option<ParamVector>,
}

/// Splits each group's columns into `k` contiguous ranges of size
/// `ceil(n/k)` or `floor(n/k)`; the first `n mod k` nodes take the larger
/// size. Nodes past the column count hold empty blocks.
pub fn partition_columns(basis: &SubspaceBasis, k: usize) -> Result<Vec<NodeState>> {
    if k == 0 {
        return Err(TwaError::Input("node count k must be >= 1".into()));
    }
    let mut nodes: Vec<NodeState> = (0..k)
        .map(|node_id| NodeState {
            node_id,
            column_ranges: Vec::with_capacity(basis.num_groups()),
            blocks: Vec::with_capacity(basis.num_groups()),
            local_gradient: None,
        })
        .collect();
    for (r, range) in basis.partition().ranges().enumerate() {
        let n = basis.columns_in_group(r);
        let base = n / k;
        let extra = n % k;
        let mut start = 0;
        for (i, node) in nodes.iter_mut().enumerate() {
            let size = base + usize::from(i < extra);
            let cols: Vec<Vec<f64>> = (start..start + size)
                .map(|c| basis.block(r).column(c))
                .collect();
            node.column_ranges.push(start..start + size);
            node.blocks
                .push(DenseMatrix::from_columns(range.len(), &cols)?);
            start += size;
        }
        debug_assert_eq!(start, n);
    }
    Ok(nodes)
}

fn check_same_length(values: &[ParamVector]) -> Result<usize> {
    let first = values
        .first()
        .ok_or_else(|| TwaError::Input("all-reduce over zero participants".into()))?;
    for (i, v) in values.iter().enumerate() {
        if v.len() != first.len() {
            return Err(TwaError::Dimension(format!(
                "participant {i} holds length {}, participant 0 holds {}",
                v.len(),
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Sum of all participants' vectors, accumulated in node-id order.
pub fn all_reduce_sum(values: &[ParamVector]) -> Result<ParamVector> {
    let d = check_same_length(values)?;
    let mut acc = values[0].as_slice().to_vec();
    for v in &values[1..] {
        for i in 0..d {
            acc[i] += v[i];
        }
    }
    Ok(ParamVector::from_raw(acc))
}

/// Mean of all participants' vectors: the value every node holds after the
/// reduction round.
pub fn all_reduce_mean(values: &[ParamVector]) -> Result<ParamVector> {
    let mut acc = all_reduce_sum(values)?.into_vec();
    let inv = 1.0 / values.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(ParamVector::from_raw(acc))
}

/// Runs one closure per node, honoring the scheduling mode; the result order
/// always follows node ids.
fn run_nodes<T, F>(nodes: &[NodeState], scheduling: NodeScheduling, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&NodeState) -> Result<T> + Sync,
{
    match scheduling {
        NodeScheduling::Sequential => nodes.iter().map(f).collect(),
        NodeScheduling::Threads => std::thread::scope(|scope| {
            let handles: Vec<_> = nodes
                .iter()
                .map(|node| scope.spawn(|| f(node)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("node worker panicked"))
                .collect()
        }),
    }
}

fn node_partial_projection(
    node: &NodeState,
    partition: &LayerPartition,
    g_mean: &ParamVector,
) -> Result<ParamVector> {
    let mut partial = vec![0.0; partition.total_len()];
    for (r, range) in partition.ranges().enumerate() {
        let block = &node.blocks[r];
        let coeffs = block.matvec_t(&g_mean[range.clone()])?;
        let y = block.matvec(&coeffs)?;
        partial[range].copy_from_slice(&y);
    }
    Ok(ParamVector::from_raw(partial))
}

/// Full distributed projection: all-reduce the local gradients to their
/// mean, project through each node's blocks, and all-reduce-sum the partial
/// projections. Equals the monolithic `project(basis, mean).projected`.
pub fn distributed_project(
    partition: &LayerPartition,
    nodes: &mut [NodeState],
    local_grads: &[ParamVector],
    scheduling: NodeScheduling,
) -> Result<ParamVector> {
    if nodes.is_empty() {
        return Err(TwaError::Input("no nodes to project on".into()));
    }
    if local_grads.len() != nodes.len() {
        return Err(TwaError::Dimension(format!(
            "{} gradients for {} nodes",
            local_grads.len(),
            nodes.len()
        )));
    }
    let d = check_same_length(local_grads)?;
    if d != partition.total_len() {
        return Err(TwaError::Dimension(format!(
            "gradients have length {d}, partition covers {}",
            partition.total_len()
        )));
    }
    for (node, g) in nodes.iter_mut().zip(local_grads) {
        node.local_gradient = Some(g.clone());
    }
    let g_mean = all_reduce_mean(local_grads)?;
    let partials = run_nodes(nodes, scheduling, |node| {
        node_partial_projection(node, partition, &g_mean)
    })?;
    all_reduce_sum(&partials)
}

/// Node pool bound to a basis, exposing the two pieces the coefficient
/// optimizer needs per step: assembled coefficient gradients and the affine
/// reconstruction from per-node partial sums.
#[derive(Debug)]
pub struct DistributedProjector<'a> {
    basis: &'a SubspaceBasis,
    nodes: Vec<NodeState>,
    scheduling: NodeScheduling,
}

impl<'a> DistributedProjector<'a> {
    pub fn new(
        basis: &'a SubspaceBasis,
        config: &DistributedConfig,
        scheduling: NodeScheduling,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            basis,
            nodes: partition_columns(basis, config.k)?,
            scheduling,
        })
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    /// Coefficient gradients `P^T g` assembled from per-node column slices.
    /// Every node sees the same shard here, so the reduce round returns the
    /// gradient itself up to floating-point rounding.
    pub fn coeff_gradients(&self, g: &ParamVector) -> Result<Vec<Vec<f64>>> {
        let shards: Vec<ParamVector> = vec![g.clone(); self.nodes.len()];
        let g_mean = all_reduce_mean(&shards)?;
        let per_node = run_nodes(&self.nodes, self.scheduling, |node| {
            let mut slices = Vec::with_capacity(node.blocks.len());
            for (block, range) in node.blocks.iter().zip(self.basis.partition().ranges()) {
                slices.push(block.matvec_t(&g_mean[range])?);
            }
            Ok(slices)
        })?;
        let mut full: Vec<Vec<f64>> = (0..self.basis.num_groups())
            .map(|r| vec![0.0; self.basis.columns_in_group(r)])
            .collect();
        for (node, slices) in self.nodes.iter().zip(per_node) {
            for (r, slice) in slices.into_iter().enumerate() {
                full[r][node.column_ranges[r].clone()].copy_from_slice(&slice);
            }
        }
        Ok(full)
    }

    /// Affine reconstruction `centers + sum_i P_i X_i`, reduced over nodes in
    /// id order.
    pub fn reconstruct(&self, x: &Coefficients) -> Result<ParamVector> {
        if x.blocks.len() != self.basis.num_groups() {
            return Err(TwaError::Dimension(format!(
                "{} coefficient blocks for {} groups",
                x.blocks.len(),
                self.basis.num_groups()
            )));
        }
        let partition = self.basis.partition();
        let partials = run_nodes(&self.nodes, self.scheduling, |node| {
            let mut partial = vec![0.0; partition.total_len()];
            for (r, range) in partition.ranges().enumerate() {
                let slice = &x.blocks[r][node.column_ranges[r].clone()];
                let y = node.blocks[r].matvec(slice)?;
                partial[range].copy_from_slice(&y);
            }
            Ok(ParamVector::from_raw(partial))
        })?;
        let mut out = all_reduce_sum(&partials)?.into_vec();
        for (range, r) in partition.ranges().zip(0..) {
            for (o, c) in out[range].iter_mut().zip(self.basis.center(r).iter()) {
                *o += c;
            }
        }
        Ok(ParamVector::from_raw(out))
    }
}
