//! Trainable weight averaging toolkit.
//!
//! Samples weight checkpoints from a training run, extracts a low-dimensional
//! affine subspace spanned by them (globally or per layer group), and
//! optimizes the averaging coefficients by projected gradient descent.
//! Ships with the classic averaging baselines (SWA, latest-weight averaging,
//! greedy soup), a deterministic simulation of multi-node block projection,
//! and an experiment harness with a small manual-backprop MLP so the whole
//! pipeline runs self-contained.

pub mod averaging;
pub mod checkpoint;
pub mod data;
pub mod distributed;
pub mod error;
pub mod harness;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod subspace;

pub use averaging::{greedy_soup, lawa, mean_weights, swa, AveragingWeights, SoupResult};
pub use checkpoint::{
    read_weights_file, write_weights_file, CheckpointEntry, CheckpointSet, CheckpointStore,
    SamplingMode, SamplingPhase, SamplingPolicy,
};
pub use data::{load_csv, make_synthetic, Dataset, SyntheticKind};
pub use distributed::{
    all_reduce_mean, all_reduce_sum, distributed_project, partition_columns, DistributedConfig,
    DistributedProjector, NodeScheduling, NodeState, PartitionStrategy,
};
pub use error::{Result, TwaError};
pub use harness::{
    bench_extraction, derive_seed, evaluate_weights_file, gaussian_study, prepare_splits,
    run_pipeline, split_dataset, train_sgd, DatasetConfig, EpochStats, ExperimentConfig,
    ExtractionBenchReport, GaussianStudyConfig, GaussianStudyReport, GaussianTrial, MetricsReport,
    PipelineMode, SgdConfig, SourceKind, Splits, TrainOutcome,
};
pub use model::{evaluate, init_params, loss_and_grad, Activation, BatchLoss, MlpSpec};
pub use optimizer::{
    lr_at, run_twa, write_history_jsonl, Batcher, DataSource, HistoryPoint, Schedule, TwaConfig,
    TwaState,
};
pub use params::{axpy, DenseMatrix, LayerPartition, ParamVector};
pub use subspace::{Coefficients, Projection, SubspaceBasis};
