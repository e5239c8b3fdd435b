//! Coefficient optimization by projected gradient descent.
//!
//! The coefficients start at zero, so the first iterate is the plain
//! checkpoint average, and every update applies
//! `X <- X - eta * (P^T g + lambda * X)` per layer group. The iterate
//! therefore never leaves the affine span of the basis. Learning rates come
//! from a scaled schedule; regularization acts on the coefficients, not on
//! the reconstructed weights.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributed::{DistributedConfig, DistributedProjector, NodeScheduling};
use crate::error::{Result, TwaError};
use crate::model::{loss_and_grad, MlpSpec};
use crate::params::ParamVector;
use crate::subspace::{Coefficients, SubspaceBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    ScaledLinear,
    Cosine,
}

/// Which split the coefficient phase draws its batches from. Training data
/// suits weights sampled early in a run; held-out validation data suits
/// fine-tuned weights that already fit the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Train,
    Validation,
}

/// Hyperparameters of the coefficient phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwaConfig {
    pub eta0: f64,
    pub lambda: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub scale_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_source: DataSource,
}

impl Default for TwaConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            lambda: 1e-5,
            steps: 100,
            schedule: Schedule::ScaledLinear,
            scale_factor: 1.0,
            batch_size: 128,
            seed: 0,
            data_source: DataSource::Train,
        }
    }
}

impl TwaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(TwaError::Input(format!(
                "learning rate must be positive, got {}",
                self.eta0
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TwaError::Input(format!(
                "regularization must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.steps == 0 {
            return Err(TwaError::Input("step budget must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TwaError::Input("batch size must be >= 1".into()));
        }
        if !(self.scale_factor >= 1.0 && self.scale_factor.is_finite()) {
            return Err(TwaError::Input(format!(
                "schedule scale factor must be >= 1, got {}",
                self.scale_factor
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based, `step < config.steps`).
pub fn lr_at(config: &TwaConfig, step: usize) -> f64 {
    let peak = config.eta0 * config.scale_factor;
    let t = step as f64 / config.steps as f64;
    match config.schedule {
        Schedule::Constant => peak,
        Schedule::ScaledLinear => peak * (1.0 - t),
        Schedule::Cosine => peak * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0,
    }
}

/// One loss sample along the optimization path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: u64,
    pub loss: f64,
    pub eta: f64,
}

/// Writes the optimization history as JSON lines.
pub fn write_history_jsonl(history: &[HistoryPoint], mut out: impl Write) -> std::io::Result<()> {
    for point in history {
        serde_json::to_writer(&mut out, point)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mutable optimization state bound to an immutable basis.
#[derive(Debug)]
pub struct TwaState<'a> {
    basis: &'a SubspaceBasis,
    pub coeffs: Coefficients,
    pub step: u64,
    pub history: Vec<HistoryPoint>,
}

impl<'a> TwaState<'a> {
    /// Starts at `X = 0`, i.e. at the plain checkpoint average.
    pub fn new(basis: &'a SubspaceBasis) -> Self {
        Self {
            basis,
            coeffs: Coefficients::zeros_for(basis),
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn basis(&self) -> &'a SubspaceBasis {
        self.basis
    }

    /// Current point in parameter space.
    pub fn reconstruct(&self) -> Result<ParamVector> {
        self.basis.reconstruct(&self.coeffs)
    }

    /// One update from a full parameter-space gradient. Rejects non-finite
    /// gradients without touching the state.
    pub fn apply_step(&mut self, g: &ParamVector, eta: f64, lambda: f64) -> Result<()> {
        if !g.is_finite() {
            return Err(TwaError::Numeric(
                "gradient contains non-finite entries".into(),
            ));
        }
        let coeff_grads = self.basis.coeff_gradients(g)?;
        self.apply_coeff_step(&coeff_grads, eta, lambda)
    }

    /// One update from precomputed per-group coefficient gradients; this is
    /// the entry point the distributed path uses after its reduce rounds.
    pub fn apply_coeff_step(
        &mut self,
        coeff_grads: &[Vec<f64>],
        eta: f64,
        lambda: f64,
    ) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(TwaError::Input(format!(
                "step size must be positive, got {eta}"
            )));
        }
        if coeff_grads.len() != self.coeffs.blocks.len() {
            return Err(TwaError::Dimension(format!(
                "{} gradient blocks for {} coefficient blocks",
                coeff_grads.len(),
                self.coeffs.blocks.len()
            )));
        }
        for (r, (block, grads)) in self.coeffs.blocks.iter().zip(coeff_grads).enumerate() {
            if block.len() != grads.len() {
                return Err(TwaError::Dimension(format!(
                    "group {r}: {} gradient entries for {} coefficients",
                    grads.len(),
                    block.len()
                )));
            }
            if grads.iter().any(|v| !v.is_finite()) {
                return Err(TwaError::Numeric(format!(
                    "group {r}: non-finite coefficient gradient"
                )));
            }
        }
        for (block, grads) in self.coeffs.blocks.iter_mut().zip(coeff_grads) {
            for (x, &cg) in block.iter_mut().zip(grads) {
                *x -= eta * (cg + lambda * *x);
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn record(&mut self, loss: f64, eta: f64) {
        self.history.push(HistoryPoint {
            step: self.step,
            loss,
            eta,
        });
    }
}

/// Deterministic mini-batch cursor: a seeded shuffle of the row indices,
/// reshuffled every epoch. The trailing partial batch is used as-is.
#[derive(Debug)]
pub struct Batcher {
    indices: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(len > 0 && batch_size > 0);
        let mut batcher = Self {
            indices: (0..len).collect(),
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        batcher.indices.shuffle(&mut batcher.rng);
        batcher
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.indices.len());
        let batch = self.indices[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// Runs the full coefficient-training loop: starting at the checkpoint
/// average, draw a batch per step, take the loss gradient at the current
/// reconstruction, and update the coefficients with the scheduled rate.
/// With a distributed config the projection and reconstruction run through
/// the simulated node pool; node count 1 reproduces the monolithic path
/// bit for bit.
pub fn run_twa<'a>(
    basis: &'a SubspaceBasis,
    spec: &MlpSpec,
    data: &Dataset,
    config: &TwaConfig,
    dist: Option<&DistributedConfig>,
) -> Result<(ParamVector, TwaState<'a>)> {
    config.validate()?;
    let projector = dist
        .map(|cfg| DistributedProjector::new(basis, cfg, NodeScheduling::Sequential))
        .transpose()?;
    let mut state = TwaState::new(basis);
    let mut batcher = Batcher::new(data.len(), config.batch_size, config.seed);

    for step in 0..config.steps {
        let rows = batcher.next_batch();
        let w = match &projector {
            Some(p) => p.reconstruct(&state.coeffs)?,
            None => state.reconstruct()?,
        };
        let batch = loss_and_grad(spec, &w, data, &rows)?;
        let eta = lr_at(config, step);
        state.record(batch.value, eta);
        match &projector {
            Some(p) => {
                let coeff_grads = p.coeff_gradients(&batch.gradient)?;
                state.apply_coeff_step(&coeff_grads, eta, config.lambda)?;
            }
            None => state.apply_step(&batch.gradient, eta, config.lambda)?,
        }
    }

    let w_final = match &projector {
        Some(p) => p.reconstruct(&state.coeffs)?,
        None => state.reconstruct()?,
    };
    Ok((w_final, state))
}
