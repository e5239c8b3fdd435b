//! Static weight-averaging baselines: plain averaging (SWA), latest-weight
//! averaging, and the greedy soup. Every result is reported together with
//! its combination coefficients over the raw checkpoints, so callers can
//! verify `w = sum alpha_i w_i` directly.
//!
//! Averaged weights are used as-is. Architectures with running statistics
//! (batch normalization and friends) would need those statistics
//! re-estimated after averaging; the MLPs in this crate carry none, so no
//! such pass exists here.

use crate::checkpoint::CheckpointSet;
use crate::error::{Result, TwaError};
use crate::params::ParamVector;

/// Combination coefficients over a checkpoint set, aligned with entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingWeights {
    pub alpha: Vec<f64>,
}

/// Uniform mean of in-memory weight vectors.
pub fn mean_weights(weights: &[ParamVector]) -> Result<ParamVector> {
    let n = weights.len();
    if n == 0 {
        return Err(TwaError::Input("cannot average an empty set".into()));
    }
    let d = weights[0].len();
    let mut sum = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        if w.len() != d {
            return Err(TwaError::Dimension(format!(
                "checkpoint {i} has length {}, expected {d}",
                w.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(w.iter()) {
            *s += v;
        }
    }
    let inv = 1.0 / n as f64;
    for s in &mut sum {
        *s *= inv;
    }
    Ok(ParamVector::from_raw(sum))
}

/// Uniform mean of every checkpoint in the set.
pub fn swa(set: &CheckpointSet) -> Result<(ParamVector, AveragingWeights)> {
    let weights = set.load_weights()?;
    let w = mean_weights(&weights)?;
    let n = weights.len();
    Ok((
        w,
        AveragingWeights {
            alpha: vec![1.0 / n as f64; n],
        },
    ))
}

/// Uniform mean of the last `t` checkpoints in step order.
pub fn lawa(set: &CheckpointSet, t: usize) -> Result<(ParamVector, AveragingWeights)> {
    let n = set.len();
    if t == 0 || t > n {
        return Err(TwaError::Input(format!(
            "averaging horizon t={t} must be within 1..={n}"
        )));
    }
    let weights: Vec<ParamVector> = (n - t..n)
        .map(|i| set.load_weight(i))
        .collect::<Result<_>>()?;
    let w = mean_weights(&weights)?;
    let mut alpha = vec![0.0; n];
    for a in &mut alpha[n - t..] {
        *a = 1.0 / t as f64;
    }
    Ok((w, AveragingWeights { alpha }))
}

/// Result of a greedy soup: the averaged weights, their coefficients, and
/// the kept entry indices in the order they were added.
#[derive(Debug, Clone)]
pub struct SoupResult {
    pub weights: ParamVector,
    pub alpha: AveragingWeights,
    pub kept: Vec<usize>,
    pub final_metric: f64,
}

/// Greedy soup over a checkpoint set. Candidates are visited in descending
/// metric order (stored `val_metric` when present, otherwise the evaluator;
/// ties go to the earlier training step) and a candidate is kept exactly
/// when the evaluated average of the soup plus the candidate does not fall
/// below the current soup metric.
pub fn greedy_soup(
    set: &CheckpointSet,
    mut evaluator: impl FnMut(&ParamVector) -> Result<f64>,
) -> Result<SoupResult> {
    let n = set.len();
    if n == 0 {
        return Err(TwaError::Input("cannot soup an empty set".into()));
    }
    let weights = set.load_weights()?;

    let mut metrics = Vec::with_capacity(n);
    for (i, entry) in set.entries.iter().enumerate() {
        let m = match entry.val_metric {
            Some(m) => m,
            None => evaluator(&weights[i])?,
        };
        if !m.is_finite() {
            return Err(TwaError::Numeric(format!(
                "validation metric for entry {i} is not finite"
            )));
        }
        metrics.push(m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        metrics[b]
            .total_cmp(&metrics[a])
            .then(set.entries[a].step.cmp(&set.entries[b].step))
    });

    let best = order[0];
    let mut kept = vec![best];
    let mut soup_metric = evaluator(&weights[best])?;
    let best_individual = soup_metric;
    for &candidate in &order[1..] {
        let trial: Vec<ParamVector> = kept
            .iter()
            .chain(std::iter::once(&candidate))
            .map(|&i| weights[i].clone())
            .collect();
        let trial_mean = mean_weights(&trial)?;
        let m = evaluator(&trial_mean)?;
        if m >= soup_metric {
            kept.push(candidate);
            soup_metric = m;
        }
    }

    assert!(
        soup_metric >= best_individual,
        "greedy soup metric {soup_metric} fell below the best individual {best_individual}; \
         the evaluator is not consistent across calls"
    );

    let members: Vec<ParamVector> = kept.iter().map(|&i| weights[i].clone()).collect();
    let soup = mean_weights(&members)?;
    let mut alpha = vec![0.0; n];
    for &i in &kept {
        alpha[i] = 1.0 / kept.len() as f64;
    }
    Ok(SoupResult {
        weights: soup,
        alpha: AveragingWeights { alpha },
        kept,
        final_metric: soup_metric,
    })
}
