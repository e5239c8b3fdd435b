//! Experiment driver: SGD pre-training with checkpoint sampling, the
//! coefficient-training and baseline-averaging pipelines, the Gaussian
//! estimator study, and the extraction timing benchmark.
//!
//! One master seed partitions all randomness (data generation, splits,
//! weight init, batching, study trials) through derived streams, so every
//! report is reproducible except for its wall-clock timing field.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::averaging::{greedy_soup, lawa, mean_weights, swa};
use crate::checkpoint::{CheckpointSet, CheckpointStore, SamplingPhase, SamplingPolicy};
use crate::data::{load_csv, make_synthetic, Dataset, SyntheticKind};
use crate::distributed::DistributedConfig;
use crate::error::{Result, TwaError};
use crate::model::{evaluate, init_params, loss_and_grad, MlpSpec};
use crate::optimizer::{run_twa, write_history_jsonl, Batcher, DataSource, TwaConfig};
use crate::params::{LayerPartition, ParamVector};
use crate::subspace::SubspaceBasis;

/// Splitmix-style derivation of per-subsystem seeds from the master seed.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_DATA: u64 = 1;
const SALT_SPLIT: u64 = 2;
const SALT_MODEL: u64 = 3;
const SALT_SGD_BATCH: u64 = 4;
const SALT_TWA: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    TwoGaussians,
    TwoMoons,
    Csv,
}

/// Where the experiment data comes from and how it is split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: SourceKind,
    pub m: usize,
    pub noise: f64,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    pub split: [f64; 3],
}

/// Regular-training hyperparameters for the pre-training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
}

/// Full experiment description; serializable as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: MlpSpec,
    pub data: DatasetConfig,
    pub sgd: SgdConfig,
    pub sampling: SamplingPolicy,
    pub twa: TwaConfig,
    #[serde(default)]
    pub distributed: Option<DistributedConfig>,
    /// Horizon for latest-weight averaging; defaults to half the set.
    #[serde(default)]
    pub lawa_t: Option<usize>,
    /// Group count for layer-wise subspaces.
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn default_groups() -> usize {
    6
}

impl ExperimentConfig {
    /// The standard desk benchmark: blob data, a [2, 32, 2] MLP, 200 SGD
    /// epochs with step decay at 100 and 150, per-epoch sampling capped at
    /// the first 100 epochs, and a 10-epoch-equivalent coefficient budget.
    pub fn desk_benchmark(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let m = 2000;
        let split = [0.7, 0.15, 0.15];
        let batch_size = 128;
        let train_len = (m as f64 * split[0]).floor() as usize;
        let steps_per_epoch = train_len.div_ceil(batch_size);
        Self {
            model: MlpSpec {
                layer_sizes: vec![2, 32, 2],
                activation: crate::model::Activation::Relu,
                seed: derive_seed(seed, SALT_MODEL),
            },
            data: DatasetConfig {
                kind: SourceKind::TwoGaussians,
                m,
                noise: 0.3,
                csv_path: None,
                split,
            },
            sgd: SgdConfig {
                // scaled down from image-scale training so convergence spans
                // the sampled head stage instead of finishing in one epoch
                lr: 0.003,
                momentum: 0.9,
                weight_decay: 1e-4,
                epochs: 200,
                batch_size,
                lr_decay_epochs: vec![100, 150],
                lr_decay_factor: 0.1,
            },
            sampling: SamplingPolicy::every_n_epochs(1, Some(100)),
            twa: TwaConfig {
                eta0: 0.1,
                lambda: 1e-5,
                steps: 10 * steps_per_epoch,
                schedule: crate::optimizer::Schedule::ScaledLinear,
                scale_factor: 1.0,
                batch_size,
                seed: derive_seed(seed, SALT_TWA),
                data_source: DataSource::Train,
            },
            distributed: None,
            lawa_t: None,
            groups: 6,
            output_dir: output_dir.into(),
            seed,
        }
    }

    /// Re-derives the sub-seeds from a new master seed.
    pub fn reseed(&mut self, master: u64) {
        self.seed = master;
        self.model.seed = derive_seed(master, SALT_MODEL);
        self.twa.seed = derive_seed(master, SALT_TWA);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        self.twa.validate()?;
        if let Some(dist) = &self.distributed {
            dist.validate()?;
        }
        if self.data.m < 2 && self.data.kind != SourceKind::Csv {
            return Err(TwaError::Input("dataset needs at least 2 rows".into()));
        }
        if self.data.kind == SourceKind::Csv && self.data.csv_path.is_none() {
            return Err(TwaError::Input("csv datasets need csv_path".into()));
        }
        if self.data.split.iter().any(|&f| f <= 0.0) {
            return Err(TwaError::Input("split fractions must be positive".into()));
        }
        let total: f64 = self.data.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TwaError::Input(format!(
                "split fractions sum to {total}, expected 1"
            )));
        }
        if self.sgd.epochs == 0 {
            return Err(TwaError::Input("SGD needs at least one epoch".into()));
        }
        if self.sgd.batch_size == 0 {
            return Err(TwaError::Input("SGD batch size must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(TwaError::Input("group count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("checkpoints").join("manifest.json")
    }
}

/// Seeded train/validation/test partition of one dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds the dataset named by the config and splits it with a seeded
/// shuffle.
pub fn prepare_splits(config: &ExperimentConfig) -> Result<Splits> {
    config.validate()?;
    let data = match config.data.kind {
        SourceKind::TwoGaussians => make_synthetic(
            SyntheticKind::TwoGaussians,
            config.data.m,
            config.data.noise,
            derive_seed(config.seed, SALT_DATA),
        )?,
        SourceKind::TwoMoons => make_synthetic(
            SyntheticKind::TwoMoons,
            config.data.m,
            config.data.noise,
            derive_seed(config.seed, SALT_DATA),
        )?,
        SourceKind::Csv => load_csv(config.data.csv_path.as_ref().unwrap())?,
    };
    split_dataset(&data, config.data.split, derive_seed(config.seed, SALT_SPLIT))
}

/// Splits rows into train/val/test by fraction after a seeded shuffle.
pub fn split_dataset(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let m = data.len();
    let n_train = (m as f64 * fractions[0]).floor() as usize;
    let n_val = (m as f64 * fractions[1]).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= m {
        return Err(TwaError::Input(format!(
            "cannot split {m} rows as {fractions:?}"
        )));
    }
    let mut indices: Vec<usize> = (0..m).collect();
    use rand::seq::SliceRandom;
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: data.select(&indices[..n_train])?,
        val: data.select(&indices[n_train..n_train + n_val])?,
        test: data.select(&indices[n_train + n_val..])?,
    })
}

/// Accuracy trace of one SGD epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Everything the pre-training phase produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoints: CheckpointSet,
    pub final_weights: ParamVector,
    pub epoch_stats: Vec<EpochStats>,
}

/// Mini-batch SGD with momentum, weight decay, and step-wise decay; emits
/// checkpoints according to the sampling policy.
pub fn train_sgd(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let splits = prepare_splits(config)?;
    train_sgd_with(config, &splits)
}

/// SGD over pre-built splits (so pipelines can share them).
pub fn train_sgd_with(config: &ExperimentConfig, splits: &Splits) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &config.model;
    let d = spec.param_count();
    let mut w = init_params(spec)?.into_vec();
    let mut velocity = vec![0.0; d];

    std::fs::create_dir_all(&config.output_dir).map_err(|source| TwaError::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let mut store = CheckpointStore::create(config.output_dir.join("checkpoints"), d)?;

    let train_len = splits.train.len();
    let steps_per_epoch = train_len.div_ceil(config.sgd.batch_size);
    let mut batcher = Batcher::new(
        train_len,
        config.sgd.batch_size,
        derive_seed(config.seed, SALT_SGD_BATCH),
    );

    let mut epoch_stats = Vec::with_capacity(config.sgd.epochs);
    let mut step = 0usize;
    let mut taken = 0usize;
    for epoch in 1..=config.sgd.epochs {
        let decays = config
            .sgd
            .lr_decay_epochs
            .iter()
            .filter(|&&b| epoch > b)
            .count();
        let lr = config.sgd.lr * config.sgd.lr_decay_factor.powi(decays as i32);
        for _ in 0..steps_per_epoch {
            let rows = batcher.next_batch();
            let wv = ParamVector::from_vec(w.clone()).map_err(|_| {
                TwaError::Numeric("SGD weights diverged to non-finite values".into())
            })?;
            let batch = loss_and_grad(spec, &wv, &splits.train, &rows)?;
            for i in 0..d {
                let g = batch.gradient[i] + config.sgd.weight_decay * w[i];
                velocity[i] = config.sgd.momentum * velocity[i] + g;
                w[i] -= lr * velocity[i];
            }
            step += 1;
            if config
                .sampling
                .should_sample(epoch, step, steps_per_epoch, taken)
            {
                let wv = ParamVector::from_vec(w.clone()).map_err(|_| {
                    TwaError::Numeric("SGD weights diverged to non-finite values".into())
                })?;
                store.save(&wv, step as u64, epoch as u64, None)?;
                taken += 1;
                if config.sampling.phase == SamplingPhase::Tail {
                    if let Some(limit) = config.sampling.limit {
                        store.enforce_tail_limit(limit)?;
                    }
                }
            }
        }
        let wv = ParamVector::from_vec(w.clone())
            .map_err(|_| TwaError::Numeric("SGD weights diverged to non-finite values".into()))?;
        epoch_stats.push(EpochStats {
            epoch,
            lr,
            train_acc: evaluate(spec, &wv, &splits.train)?,
            test_acc: evaluate(spec, &wv, &splits.test)?,
        });
    }

    let final_weights = ParamVector::from_vec(w)
        .map_err(|_| TwaError::Numeric("SGD weights diverged to non-finite values".into()))?;
    crate::checkpoint::write_weights_file(config.output_dir.join("sgd_final.twa1"), &final_weights)?;
    let history_path = config.output_dir.join("sgd_history.jsonl");
    let mut out = Vec::new();
    for stats in &epoch_stats {
        serde_json::to_writer(&mut out, stats).expect("stats serialize");
        out.push(b'\n');
    }
    std::fs::write(&history_path, out).map_err(|source| TwaError::Io {
        path: history_path,
        source,
    })?;

    Ok(TrainOutcome {
        checkpoints: CheckpointSet::load(store.manifest_path())?,
        final_weights,
        epoch_stats,
    })
}

/// Which solution the pipeline produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Twa,
    TwaByLayer,
    Swa,
    Lawa,
    GreedySoup,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Twa => "twa",
            Self::TwaByLayer => "twa_by_layer",
            Self::Swa => "swa",
            Self::Lawa => "lawa",
            Self::GreedySoup => "greedy_soup",
        }
    }
}

/// Per-run metrics written as a JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
    pub n_checkpoints: usize,
    pub steps: usize,
    pub seed: u64,
    pub timing_s: f64,
}

/// Runs the selected method over the config's checkpoints (training first if
/// none exist), evaluates the solution on all three splits, and writes the
/// report, the solution weights, and (for coefficient training) the loss
/// history into the output directory.
pub fn run_pipeline(config: &ExperimentConfig, mode: PipelineMode) -> Result<MetricsReport> {
    let start = Instant::now();
    config.validate()?;
    let splits = prepare_splits(config)?;
    let manifest = config.manifest_path();
    let set = if manifest.exists() {
        CheckpointSet::load(&manifest)?
    } else {
        train_sgd_with(config, &splits)?.checkpoints
    };
    let spec = &config.model;

    let (solution, steps) = match mode {
        PipelineMode::Swa => (swa(&set)?.0, 0),
        PipelineMode::Lawa => {
            let t = config.lawa_t.unwrap_or_else(|| set.len().div_ceil(2));
            (lawa(&set, t)?.0, 0)
        }
        PipelineMode::GreedySoup => {
            let soup = greedy_soup(&set, |w| evaluate(spec, w, &splits.val))?;
            (soup.weights, 0)
        }
        PipelineMode::Twa | PipelineMode::TwaByLayer => {
            let d = spec.param_count();
            let partition = match mode {
                PipelineMode::Twa => LayerPartition::global(d),
                _ => LayerPartition::equal_groups(d, config.groups)?,
            };
            let basis = SubspaceBasis::extract(&set, partition)?;
            let data = match config.twa.data_source {
                DataSource::Train => &splits.train,
                DataSource::Validation => &splits.val,
            };
            let (w, state) = run_twa(&basis, spec, data, &config.twa, config.distributed.as_ref())?;
            let history_path = config
                .output_dir
                .join(format!("history_{}.jsonl", mode.name()));
            let mut buf = Vec::new();
            write_history_jsonl(&state.history, &mut buf).expect("in-memory write");
            std::fs::write(&history_path, buf).map_err(|source| TwaError::Io {
                path: history_path,
                source,
            })?;
            debug_assert!(basis.span_residual(&w).unwrap_or(f64::INFINITY) < 1e-8);
            (w, config.twa.steps)
        }
    };

    let train_acc = evaluate(spec, &solution, &splits.train)?;
    let val_acc = evaluate(spec, &solution, &splits.val)?;
    let test_acc = evaluate(spec, &solution, &splits.test)?;
    let report = MetricsReport {
        mode: mode.name().to_string(),
        train_acc,
        val_acc,
        test_acc,
        gap: train_acc - test_acc,
        n_checkpoints: set.len(),
        steps,
        seed: config.seed,
        timing_s: start.elapsed().as_secs_f64(),
    };

    crate::checkpoint::write_weights_file(
        config
            .output_dir
            .join(format!("solution_{}.twa1", mode.name())),
        &solution,
    )?;
    let report_path = config
        .output_dir
        .join(format!("report_{}.json", mode.name()));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|source| TwaError::Io {
        path: report_path,
        source,
    })?;
    Ok(report)
}

/// Parameters of the Gaussian estimator study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStudyConfig {
    pub dim: usize,
    pub samples: usize,
    pub trials: usize,
    pub covariance_scale: f64,
    pub seed: u64,
}

impl GaussianStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(TwaError::Input("dimension must be >= 1".into()));
        }
        if self.samples < 2 {
            return Err(TwaError::Input("need at least 2 samples per trial".into()));
        }
        if self.trials == 0 {
            return Err(TwaError::Input("need at least 1 trial".into()));
        }
        if !(self.covariance_scale >= 0.0 && self.covariance_scale.is_finite()) {
            return Err(TwaError::Input(format!(
                "covariance scale must be >= 0, got {}",
                self.covariance_scale
            )));
        }
        Ok(())
    }
}

/// Squared distances to the true center for both estimators in one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTrial {
    pub twa_sq_err: f64,
    pub swa_sq_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStudyReport {
    pub trials: Vec<GaussianTrial>,
    pub fraction_twa_not_worse: f64,
    pub mean_twa_sq_err: f64,
    pub mean_swa_sq_err: f64,
}

const STUDY_STEPS: usize = 600;

/// Draws weights from a Gaussian around a hidden center, then compares the
/// plain average against coefficient training on the quadratic loss
/// `0.5 (w - mu)^T Sigma^{-1} (w - mu)` inside the extracted subspace.
/// If the samples carry no spread at all, the optimized solution is the
/// average itself.
pub fn gaussian_study(config: &GaussianStudyConfig) -> Result<GaussianStudyReport> {
    config.validate()?;
    let d = config.dim;
    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(trial as u64);
        let mu: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let variances: Vec<f64> = (0..d)
            .map(|_| config.covariance_scale * rng.random_range(0.5..1.5))
            .collect();
        let samples: Vec<ParamVector> = (0..config.samples)
            .map(|_| {
                ParamVector::from_raw(
                    mu.iter()
                        .zip(&variances)
                        .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();

        let w_swa = mean_weights(&samples)?;
        let sq_err = |w: &ParamVector| -> f64 {
            w.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let swa_sq_err = sq_err(&w_swa);

        let w_twa = match SubspaceBasis::extract_from_weights(&samples, LayerPartition::global(d))
        {
            Err(TwaError::Input(_)) => w_swa.clone(),
            Err(other) => return Err(other),
            Ok(basis) => {
                let eta = 1.0 / (1.1 * quadratic_curvature_bound(&basis, &variances));
                let mut state = crate::optimizer::TwaState::new(&basis);
                for _ in 0..STUDY_STEPS {
                    let w = state.reconstruct()?;
                    let g: Vec<f64> = w
                        .iter()
                        .zip(&mu)
                        .zip(&variances)
                        .map(|((wi, mi), vi)| (wi - mi) / vi)
                        .collect();
                    state.apply_step(&ParamVector::from_raw(g), eta, 0.0)?;
                }
                state.reconstruct()?
            }
        };
        trials.push(GaussianTrial {
            twa_sq_err: sq_err(&w_twa),
            swa_sq_err,
        });
    }

    let not_worse = trials
        .iter()
        .filter(|t| t.twa_sq_err <= t.swa_sq_err)
        .count();
    let n = trials.len() as f64;
    Ok(GaussianStudyReport {
        fraction_twa_not_worse: not_worse as f64 / n,
        mean_twa_sq_err: trials.iter().map(|t| t.twa_sq_err).sum::<f64>() / n,
        mean_swa_sq_err: trials.iter().map(|t| t.swa_sq_err).sum::<f64>() / n,
        trials,
    })
}

/// Upper bound on the largest eigenvalue of `P^T Sigma^{-1} P` (the
/// curvature of the study's quadratic in coefficient space) via its trace:
/// `sum_r ||row_r||^2 / sigma_r^2`. Exact for rank-1 bases and always safe
/// as a step-size divisor.
fn quadratic_curvature_bound(basis: &SubspaceBasis, variances: &[f64]) -> f64 {
    let block = basis.block(0);
    let mut trace = 0.0;
    for (r, v) in variances.iter().enumerate() {
        let row_sq: f64 = block.row(r).iter().map(|e| e * e).sum();
        trace += row_sq / v;
    }
    trace.max(1e-12)
}

/// Samples for one extraction-benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionBenchReport {
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub extract_seconds: Vec<f64>,
    pub gram_schmidt_seconds: Vec<f64>,
    pub extract_median_s: f64,
    pub gram_schmidt_median_s: f64,
    pub ratio: f64,
}

/// Standard-normal checkpoint surrogates for the timing benchmark.
pub fn random_checkpoint_weights(n: usize, d: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            ParamVector::from_raw((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        })
        .collect()
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

const BENCH_TARGET_N: usize = 100;
const BENCH_TARGET_D: usize = 1_000_000;
const BENCH_TARGET_RATIO: f64 = 10.0;

/// Times decentralize-and-normalize extraction against the Gram-Schmidt
/// comparator on random checkpoint sets. At the reference size
/// (n = 100, D = 10^6) extraction must be at least 10x faster by median.
pub fn bench_extraction(n: usize, d: usize, repeats: usize) -> Result<ExtractionBenchReport> {
    if n < 2 || d == 0 || repeats == 0 {
        return Err(TwaError::Input(
            "benchmark needs n >= 2, d >= 1, repeats >= 1".into(),
        ));
    }
    let weights = random_checkpoint_weights(n, d, 0x0BE7);

    let mut extract_seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let basis = SubspaceBasis::extract_from_weights(&weights, LayerPartition::global(d))?;
        extract_seconds.push(t.elapsed().as_secs_f64());
        drop(basis);
    }

    let mut gram_schmidt_seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let basis = SubspaceBasis::extract_from_weights(&weights, LayerPartition::global(d))?;
        let t = Instant::now();
        let ortho = basis.gram_schmidt();
        gram_schmidt_seconds.push(t.elapsed().as_secs_f64());
        drop(ortho);
    }

    let extract_median_s = median(&extract_seconds);
    let gram_schmidt_median_s = median(&gram_schmidt_seconds);
    let ratio = gram_schmidt_median_s / extract_median_s;
    let report = ExtractionBenchReport {
        n,
        d,
        repeats,
        extract_seconds,
        gram_schmidt_seconds,
        extract_median_s,
        gram_schmidt_median_s,
        ratio,
    };
    if n == BENCH_TARGET_N && d == BENCH_TARGET_D && ratio < BENCH_TARGET_RATIO {
        return Err(TwaError::Benchmark {
            ratio,
            target: BENCH_TARGET_RATIO,
        });
    }
    Ok(report)
}

/// Loads a solution written in the `TWA1` format and evaluates it on the
/// config's splits.
pub fn evaluate_weights_file(
    config: &ExperimentConfig,
    weights_path: impl AsRef<Path>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let splits = prepare_splits(config)?;
    let w = crate::checkpoint::read_weights_file(weights_path)?;
    let spec = &config.model;
    let train_acc = evaluate(spec, &w, &splits.train)?;
    let val_acc = evaluate(spec, &w, &splits.val)?;
    let test_acc = evaluate(spec, &w, &splits.test)?;
    Ok(MetricsReport {
        mode: "eval".to_string(),
        train_acc,
        val_acc,
        test_acc,
        gap: train_acc - test_acc,
        n_checkpoints: 0,
        steps: 0,
        seed: config.seed,
        timing_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path, seed: u64) -> ExperimentConfig {
        let mut config = ExperimentConfig::desk_benchmark(seed, dir);
        config.data.m = 200;
        config.sgd.epochs = 12;
        config.sgd.batch_size = 32;
        config.sgd.lr_decay_epochs = vec![6, 9];
        config.sampling = SamplingPolicy::every_n_epochs(1, Some(8));
        config.twa.steps = 20;
        config.twa.batch_size = 32;
        config
    }

    #[test]
    fn sgd_emits_one_checkpoint_per_epoch_up_to_the_limit() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), 1);
        let outcome = train_sgd(&config).unwrap();
        assert_eq!(outcome.checkpoints.len(), 8);
        assert_eq!(outcome.epoch_stats.len(), 12);
        // per-epoch sampling lands on epoch boundaries
        let steps_per_epoch = outcome.epoch_stats.len(); // not the same thing; recompute
        let _ = steps_per_epoch;
        for (i, entry) in outcome.checkpoints.entries.iter().enumerate() {
            assert_eq!(entry.epoch, (i + 1) as u64);
        }
    }

    #[test]
    fn sgd_is_deterministic_per_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train_sgd(&small_config(dir_a.path(), 7)).unwrap();
        let b = train_sgd(&small_config(dir_b.path(), 7)).unwrap();
        assert_eq!(a.final_weights.as_slice(), b.final_weights.as_slice());
        let c = train_sgd(&small_config(tempfile::tempdir().unwrap().path(), 8)).unwrap();
        assert_ne!(a.final_weights.as_slice(), c.final_weights.as_slice());
    }

    #[test]
    fn sgd_learns_the_blob_task() {
        // the task is linearly separable plus noise (the probe oracle in the
        // data tests shows > 0.9 for a plain linear fit), so a trained MLP
        // must clear 0.95 on its own training split
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::desk_benchmark(3, dir.path());
        config.model.layer_sizes = vec![2, 16, 2];
        config.model.seed = derive_seed(3, SALT_MODEL);
        config.sgd.epochs = 50;
        config.sgd.lr_decay_epochs = vec![30, 40];
        config.sampling = SamplingPolicy::every_n_epochs(1, Some(25));
        let outcome = train_sgd(&config).unwrap();
        assert_eq!(outcome.checkpoints.len(), 25);
        let last = outcome.epoch_stats.last().unwrap();
        assert!(last.train_acc > 0.95, "train accuracy {}", last.train_acc);
    }

    #[test]
    fn swa_of_identical_checkpoints_reproduces_them() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), 5);
        // hand-write a constant checkpoint set
        let d = config.model.param_count();
        let w = init_params(&config.model).unwrap();
        let mut store =
            CheckpointStore::create(config.output_dir.join("checkpoints"), d).unwrap();
        for step in 1..=3 {
            store.save(&w, step, step, None).unwrap();
        }
        let report = run_pipeline(&config, PipelineMode::Swa).unwrap();
        let stored =
            crate::checkpoint::read_weights_file(config.output_dir.join("solution_swa.twa1"))
                .unwrap();
        let quantized: Vec<f64> = w.iter().map(|&v| f64::from(v as f32)).collect();
        for (a, b) in stored.iter().zip(&quantized) {
            assert!((a - b).abs() <= 1e-7);
        }
        assert_eq!(report.n_checkpoints, 3);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn pipeline_reports_are_reproducible_except_timing() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_pipeline(&small_config(dir_a.path(), 11), PipelineMode::Twa).unwrap();
        let b = run_pipeline(&small_config(dir_b.path(), 11), PipelineMode::Twa).unwrap();
        assert_eq!(a.train_acc, b.train_acc);
        assert_eq!(a.val_acc, b.val_acc);
        assert_eq!(a.test_acc, b.test_acc);
        assert_eq!(a.gap, b.gap);
        assert_eq!(a.n_checkpoints, b.n_checkpoints);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn report_gap_matches_recomputed_accuracies() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), 13);
        let report = run_pipeline(&config, PipelineMode::TwaByLayer).unwrap();
        // recompute independently from the stored solution
        let splits = prepare_splits(&config).unwrap();
        let w = crate::checkpoint::read_weights_file(
            config.output_dir.join("solution_twa_by_layer.twa1"),
        )
        .unwrap();
        let train = evaluate(&config.model, &w, &splits.train).unwrap();
        let test = evaluate(&config.model, &w, &splits.test).unwrap();
        // the stored solution went through f32 quantization; accuracies are
        // computed on a coarse grid, so they should agree exactly
        assert_eq!(train, report.train_acc);
        assert_eq!(test, report.test_acc);
        assert!((report.gap - (report.train_acc - report.test_acc)).abs() < 1e-15);
    }

    #[test]
    fn vanishing_twa_budget_reduces_to_swa() {
        // when gradients carry no signal the coefficient phase stays at the
        // average; emulate with lambda = 0 and a single tiny step on a
        // converged model
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path(), 17);
        config.twa.steps = 1;
        config.twa.eta0 = 1e-12;
        config.twa.lambda = 0.0;
        let swa_report = run_pipeline(&config, PipelineMode::Swa).unwrap();
        let twa_report = run_pipeline(&config, PipelineMode::Twa).unwrap();
        assert_eq!(swa_report.test_acc, twa_report.test_acc);
    }

    #[test]
    fn lawa_mode_uses_the_configured_horizon() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path(), 19);
        config.lawa_t = Some(1);
        let report = run_pipeline(&config, PipelineMode::Lawa).unwrap();
        // horizon 1 = exactly the last checkpoint
        let set = CheckpointSet::load(config.manifest_path()).unwrap();
        let last = set.load_weight(set.len() - 1).unwrap();
        let splits = prepare_splits(&config).unwrap();
        let expect = evaluate(&config.model, &last, &splits.test).unwrap();
        assert_eq!(report.test_acc, expect);
    }

    #[test]
    fn greedy_soup_mode_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), 23);
        let report = run_pipeline(&config, PipelineMode::GreedySoup).unwrap();
        assert!(report.val_acc >= 0.0 && report.val_acc <= 1.0);
        assert!(config.output_dir.join("report_greedy_soup.json").exists());
    }

    #[test]
    fn gaussian_study_degenerate_distribution_gives_zero_errors() {
        let report = gaussian_study(&GaussianStudyConfig {
            dim: 5,
            samples: 4,
            trials: 3,
            covariance_scale: 0.0,
            seed: 0,
        })
        .unwrap();
        for trial in &report.trials {
            assert_eq!(trial.twa_sq_err, 0.0);
            assert_eq!(trial.swa_sq_err, 0.0);
        }
        assert_eq!(report.fraction_twa_not_worse, 1.0);
    }

    #[test]
    fn gaussian_study_one_dimensional_case() {
        let report = gaussian_study(&GaussianStudyConfig {
            dim: 1,
            samples: 2,
            trials: 20,
            covariance_scale: 1.0,
            seed: 1,
        })
        .unwrap();
        // in 1-D the span covers the whole line, so optimization can reach
        // the center whenever the two samples differ
        for trial in &report.trials {
            assert!(trial.twa_sq_err <= trial.swa_sq_err + 1e-12);
        }
    }

    #[test]
    fn gaussian_study_reference_setting_favors_optimization() {
        let report = gaussian_study(&GaussianStudyConfig {
            dim: 20,
            samples: 16,
            trials: 50,
            covariance_scale: 1.0,
            seed: 0,
        })
        .unwrap();
        assert!(
            report.fraction_twa_not_worse >= 0.8,
            "fraction {}",
            report.fraction_twa_not_worse
        );
        assert!(report.mean_twa_sq_err < report.mean_swa_sq_err);
    }

    #[test]
    fn bench_extraction_smoke() {
        let report = bench_extraction(4, 64, 3).unwrap();
        assert_eq!(report.extract_seconds.len(), 3);
        assert_eq!(report.gram_schmidt_seconds.len(), 3);
        assert!(report.extract_median_s >= 0.0);
        assert!(bench_extraction(1, 64, 3).is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let config = ExperimentConfig::desk_benchmark(42, "out");
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn invalid_splits_are_rejected() {
        let mut config = ExperimentConfig::desk_benchmark(0, "out");
        config.data.split = [0.5, 0.5, 0.5];
        assert!(config.validate().is_err());
        config.data.split = [0.9, -0.05, 0.15];
        assert!(config.validate().is_err());
    }

    #[test]
    fn split_fractions_partition_the_rows() {
        let data = make_synthetic(SyntheticKind::TwoGaussians, 100, 0.2, 0).unwrap();
        let splits = split_dataset(&data, [0.7, 0.15, 0.15], 9).unwrap();
        assert_eq!(splits.train.len(), 70);
        assert_eq!(splits.val.len(), 15);
        assert_eq!(splits.test.len(), 15);
    }
}
