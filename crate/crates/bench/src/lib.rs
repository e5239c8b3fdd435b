//! Shared fixtures for the criterion benchmarks.

use twa_core::harness::random_checkpoint_weights;
use twa_core::params::{LayerPartition, ParamVector};
use twa_core::subspace::SubspaceBasis;

/// Standard-normal checkpoint surrogates with a fixed seed.
pub fn fixture_weights(n: usize, d: usize) -> Vec<ParamVector> {
    random_checkpoint_weights(n, d, 0xBE9C)
}

/// Basis extracted from [`fixture_weights`] with a single global group.
pub fn fixture_basis(n: usize, d: usize) -> SubspaceBasis {
    SubspaceBasis::extract_from_weights(&fixture_weights(n, d), LayerPartition::global(d))
        .expect("fixture weights have spread")
}
