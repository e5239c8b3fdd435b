//! Command-line driver for subspace-training experiments.
//!
//! Every experiment command reads an optional JSON config (`--config`) and
//! applies flag overrides on top; without a config the built-in desk
//! benchmark is the base. Reports are printed as JSON on stdout and written
//! into the experiment's output directory.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use twa_core::harness::{
    bench_extraction, evaluate_weights_file, gaussian_study, prepare_splits, run_pipeline,
    train_sgd_with, ExperimentConfig, GaussianStudyConfig, MetricsReport, PipelineMode,
    SourceKind,
};
use twa_core::model::evaluate;
use twa_core::optimizer::{DataSource, Schedule};
use twa_core::checkpoint::{SamplingMode, SamplingPhase};
use twa_core::distributed::DistributedConfig;
use twa_core::Activation;

#[derive(Parser)]
#[command(
    name = "twa",
    about = "Trainable weight averaging: subspace training over sampled checkpoints",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run SGD pre-training and emit checkpoints plus a manifest.
    Train(ConfigArgs),
    /// Produce a static averaging baseline over existing checkpoints.
    Average {
        #[arg(long, value_enum)]
        mode: AverageMode,
        /// Horizon for latest-weight averaging (defaults to half the set).
        #[arg(long)]
        lawa_t: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Optimize averaging coefficients in the extracted subspace.
    Twa {
        /// Use one subspace block per contiguous parameter group.
        #[arg(long)]
        by_layer: bool,
        /// Number of contiguous groups for --by-layer.
        #[arg(long)]
        groups: Option<usize>,
        /// Simulate k-node distributed gradient projection.
        #[arg(long)]
        dist_k: Option<usize>,
        /// Draw coefficient-training batches from the validation split.
        #[arg(long)]
        val_data: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare plain and optimized averaging on Gaussian-sampled weights.
    GaussianStudy {
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        cov_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time subspace extraction against the Gram-Schmidt comparator.
    BenchExtract {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate stored weights on the config's data splits.
    Eval {
        /// Weights in the TWA1 container format.
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AverageMode {
    Swa,
    Lawa,
    Soup,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    TwoGaussians,
    TwoMoons,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    ScaledLinear,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleModeArg {
    EveryNEpochs,
    EveryNSteps,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplePhaseArg {
    Head,
    Tail,
}

/// Config file plus overrides mirroring the experiment fields.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; re-derives the model and coefficient-phase seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated layer sizes, e.g. 2,32,2.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    csv_path: Option<PathBuf>,
    /// Synthetic dataset size.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Comma-separated train,val,test fractions, e.g. 0.7,0.15,0.15.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    sgd_lr: Option<f64>,
    #[arg(long)]
    sgd_momentum: Option<f64>,
    #[arg(long)]
    sgd_weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    sgd_batch_size: Option<usize>,
    /// Comma-separated epochs at which the SGD rate decays.
    #[arg(long)]
    lr_decay_epochs: Option<String>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long, value_enum)]
    sample_mode: Option<SampleModeArg>,
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long, value_enum)]
    sample_phase: Option<SamplePhaseArg>,
    #[arg(long)]
    sample_limit: Option<usize>,
    #[arg(long)]
    twa_eta0: Option<f64>,
    #[arg(long)]
    twa_lambda: Option<f64>,
    #[arg(long)]
    twa_steps: Option<usize>,
    #[arg(long, value_enum)]
    twa_schedule: Option<ScheduleArg>,
    #[arg(long)]
    twa_scale_factor: Option<f64>,
    #[arg(long)]
    twa_batch_size: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|cell| {
            cell.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("invalid {what} entry {cell:?}"))
        })
        .collect()
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::desk_benchmark(0, "twa_out"),
        };
        if let Some(seed) = self.seed {
            config.reseed(seed);
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(layers) = &self.layers {
            config.model.layer_sizes = parse_list(layers, "layer size")?;
        }
        if let Some(act) = self.activation {
            config.model.activation = match act {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Tanh => Activation::Tanh,
            };
        }
        if let Some(kind) = self.dataset {
            config.data.kind = match kind {
                DatasetArg::TwoGaussians => SourceKind::TwoGaussians,
                DatasetArg::TwoMoons => SourceKind::TwoMoons,
                DatasetArg::Csv => SourceKind::Csv,
            };
        }
        if let Some(path) = &self.csv_path {
            config.data.csv_path = Some(path.clone());
        }
        if let Some(m) = self.m {
            config.data.m = m;
        }
        if let Some(noise) = self.noise {
            config.data.noise = noise;
        }
        if let Some(split) = &self.split {
            let parts: Vec<f64> = parse_list(split, "split fraction")?;
            if parts.len() != 3 {
                bail!("--split needs exactly three fractions");
            }
            config.data.split = [parts[0], parts[1], parts[2]];
        }
        if let Some(v) = self.sgd_lr {
            config.sgd.lr = v;
        }
        if let Some(v) = self.sgd_momentum {
            config.sgd.momentum = v;
        }
        if let Some(v) = self.sgd_weight_decay {
            config.sgd.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            config.sgd.epochs = v;
        }
        if let Some(v) = self.sgd_batch_size {
            config.sgd.batch_size = v;
        }
        if let Some(list) = &self.lr_decay_epochs {
            config.sgd.lr_decay_epochs = parse_list(list, "decay epoch")?;
        }
        if let Some(v) = self.lr_decay_factor {
            config.sgd.lr_decay_factor = v;
        }
        if let Some(mode) = self.sample_mode {
            config.sampling.mode = match mode {
                SampleModeArg::EveryNEpochs => SamplingMode::EveryNEpochs,
                SampleModeArg::EveryNSteps => SamplingMode::EveryNSteps,
            };
        }
        if let Some(v) = self.sample_n {
            config.sampling.n = v;
        }
        if let Some(phase) = self.sample_phase {
            config.sampling.phase = match phase {
                SamplePhaseArg::Head => SamplingPhase::Head,
                SamplePhaseArg::Tail => SamplingPhase::Tail,
            };
        }
        if let Some(v) = self.sample_limit {
            config.sampling.limit = Some(v);
        }
        if let Some(v) = self.twa_eta0 {
            config.twa.eta0 = v;
        }
        if let Some(v) = self.twa_lambda {
            config.twa.lambda = v;
        }
        if let Some(v) = self.twa_steps {
            config.twa.steps = v;
        }
        if let Some(s) = self.twa_schedule {
            config.twa.schedule = match s {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::ScaledLinear => Schedule::ScaledLinear,
                ScheduleArg::Cosine => Schedule::Cosine,
            };
        }
        if let Some(v) = self.twa_scale_factor {
            config.twa.scale_factor = v;
        }
        if let Some(v) = self.twa_batch_size {
            config.twa.batch_size = v;
        }
        config.validate()?;
        Ok(config)
    }
}

fn print_report(report: &MetricsReport) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let start = std::time::Instant::now();
            let splits = prepare_splits(&config)?;
            let steps_per_epoch = splits.train.len().div_ceil(config.sgd.batch_size);
            let outcome = train_sgd_with(&config, &splits)?;
            let train_acc = evaluate(&config.model, &outcome.final_weights, &splits.train)?;
            let val_acc = evaluate(&config.model, &outcome.final_weights, &splits.val)?;
            let test_acc = evaluate(&config.model, &outcome.final_weights, &splits.test)?;
            let report = MetricsReport {
                mode: "sgd".to_string(),
                train_acc,
                val_acc,
                test_acc,
                gap: train_acc - test_acc,
                n_checkpoints: outcome.checkpoints.len(),
                steps: config.sgd.epochs * steps_per_epoch,
                seed: config.seed,
                timing_s: start.elapsed().as_secs_f64(),
            };
            eprintln!(
                "wrote {} checkpoints to {}",
                outcome.checkpoints.len(),
                config.output_dir.join("checkpoints").display()
            );
            print_report(&report)
        }
        Command::Average {
            mode,
            lawa_t,
            config,
        } => {
            let mut config = config.resolve()?;
            if let Some(t) = lawa_t {
                config.lawa_t = Some(t);
            }
            let mode = match mode {
                AverageMode::Swa => PipelineMode::Swa,
                AverageMode::Lawa => PipelineMode::Lawa,
                AverageMode::Soup => PipelineMode::GreedySoup,
            };
            print_report(&run_pipeline(&config, mode)?)
        }
        Command::Twa {
            by_layer,
            groups,
            dist_k,
            val_data,
            config,
        } => {
            let mut config = config.resolve()?;
            if let Some(groups) = groups {
                config.groups = groups;
            }
            if let Some(k) = dist_k {
                config.distributed = Some(DistributedConfig::new(k));
            }
            if val_data {
                config.twa.data_source = DataSource::Validation;
            }
            let mode = if by_layer {
                PipelineMode::TwaByLayer
            } else {
                PipelineMode::Twa
            };
            print_report(&run_pipeline(&config, mode)?)
        }
        Command::GaussianStudy {
            dim,
            samples,
            trials,
            cov_scale,
            seed,
            out,
        } => {
            let report = gaussian_study(&GaussianStudyConfig {
                dim,
                samples,
                trials,
                covariance_scale: cov_scale,
                seed,
            })?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            eprintln!(
                "optimized average at least as close in {:.0}% of trials",
                report.fraction_twa_not_worse * 100.0
            );
            Ok(())
        }
        Command::BenchExtract {
            n,
            dim,
            repeats,
            out,
        } => {
            let report = bench_extraction(n, dim, repeats)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            eprintln!(
                "extraction {:.2}s vs orthogonalization {:.2}s ({:.1}x)",
                report.extract_median_s, report.gram_schmidt_median_s, report.ratio
            );
            Ok(())
        }
        Command::Eval { weights, config } => {
            let config = config.resolve()?;
            print_report(&evaluate_weights_file(&config, &weights)?)
        }
    }
}
