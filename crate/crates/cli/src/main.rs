//! Seeded pipeline from dataset simulation through model training to
//! nonstationarity benchmarks, with manifest-backed reproduction.

mod manifest;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use variobench_core::models::{ModelFamily, TrainedModel, DESK_SIDE, FULL_SIDE};
use variobench_core::training::TrainConfig;
use variobench_core::{DatasetKind, DatasetManifest, Error, Result, VariogramKind};

use manifest::CommandConfig;

fn parse_kind(s: &str) -> Result<DatasetKind> {
    DatasetKind::parse(s)
}

fn parse_variogram(s: &str) -> Result<VariogramKind> {
    VariogramKind::parse(s)
}

fn parse_family(s: &str) -> Result<ModelFamily> {
    s.parse()
}

#[derive(Parser)]
#[command(
    name = "variobench",
    version,
    about = "Simulate variogram-labeled random fields, train range regressors, and benchmark them on nonstationary data"
)]
struct Cli {
    /// Cap on worker threads for parallel stages; results are identical at
    /// any setting [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled dataset of random-field images
    Generate(GenerateArgs),
    /// Train a range regressor on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly simulated nonstationary images
    Benchmark(BenchmarkArgs),
    /// Print one realization's statistics, fitted range, and variogram
    Inspect(InspectArgs),
    /// Validate external weight files and re-save them as a checkpoint
    ImportWeights(ImportWeightsArgs),
    /// Re-run a recorded run and verify its outputs byte for byte
    Reproduce(ReproduceArgs),
}

/// Scale preset supplying defaults for grid size, ranges, and replicates.
#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Profile {
    /// 224x224 cells at 5 m, full-scale ranges, 50 replicates per setting
    Paper,
    /// 64x64 cells at 5 m, ranges scaled by 64/224, 10 replicates per setting
    Desk,
}

impl Profile {
    fn side(self) -> usize {
        match self {
            Profile::Paper => FULL_SIDE,
            Profile::Desk => DESK_SIDE,
        }
    }

    fn count(self) -> usize {
        match self {
            Profile::Paper => 50,
            Profile::Desk => 10,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset kind: train (stationary), type1 (range beyond a third of the
    /// extent), or type2 (planar trend mixed in)
    #[arg(long, value_name = "train|type1|type2", value_parser = parse_kind)]
    kind: DatasetKind,

    /// Scale preset for the defaults below
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    profile: Profile,

    /// Grid columns in cells [default: 224 paper, 64 desk]
    #[arg(long, value_name = "CELLS")]
    nx: Option<usize>,

    /// Grid rows in cells [default: 224 paper, 64 desk]
    #[arg(long, value_name = "CELLS")]
    ny: Option<usize>,

    /// Cell size in meters
    #[arg(long, value_name = "M", default_value_t = 5.0)]
    cell_size: f64,

    /// Comma-separated variogram ranges in meters [default: 40-400 m step 30
    /// for train/type2, 400-1000 m step 100 for type1, scaled by the profile]
    #[arg(long, value_name = "M,M,...", value_delimiter = ',')]
    ranges: Option<Vec<f64>>,

    /// Comma-separated trend variance proportions in [0, 1]; type2 only
    /// [default: 0.2,0.5,0.8]
    #[arg(long, value_name = "P,P,...", value_delimiter = ',')]
    proportions: Option<Vec<f64>>,

    /// Replicates per setting [default: 50 paper, 10 desk]
    #[arg(long, value_name = "N")]
    count: Option<usize>,

    /// Base seed; item seeds derive from (seed, setting index, replicate)
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,

    /// Variogram model family of the simulated residuals
    #[arg(long, value_name = "spherical|exponential|gaussian", default_value = "spherical", value_parser = parse_variogram)]
    variogram: VariogramKind,

    /// Fixed trend azimuth in degrees clockwise from north; type2 only
    /// [default: drawn per item from its seed]
    #[arg(long, value_name = "DEG")]
    azimuth: Option<f64>,

    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Overwrite a dataset or recorded run already in the output directory
    #[arg(long)]
    force: bool,
}

impl GenerateArgs {
    fn resolve(self) -> Result<(CommandConfig, PathBuf, bool)> {
        if self.kind != DatasetKind::Type2 {
            if self.proportions.is_some() {
                return Err(Error::invalid("--proportions only applies to --kind type2"));
            }
            if self.azimuth.is_some() {
                return Err(Error::invalid("--azimuth only applies to --kind type2"));
            }
        }
        let defaults = match self.kind {
            DatasetKind::Type1 => runner::default_type1_ranges(),
            _ => runner::default_train_ranges(),
        };
        let ranges_m = self
            .ranges
            .unwrap_or_else(|| runner::scale_ranges(&defaults, self.profile.side()));
        let proportions = if self.kind == DatasetKind::Type2 {
            self.proportions.unwrap_or_else(|| vec![0.2, 0.5, 0.8])
        } else {
            Vec::new()
        };
        let cfg = CommandConfig::Generate {
            kind: self.kind,
            nx: self.nx.unwrap_or_else(|| self.profile.side()),
            ny: self.ny.unwrap_or_else(|| self.profile.side()),
            cell_size_m: self.cell_size,
            variogram: self.variogram,
            ranges_m,
            proportions,
            count: self.count.unwrap_or_else(|| self.profile.count()),
            seed: self.seed,
            azimuth_deg: self.azimuth,
        };
        Ok((cfg, self.out, self.force))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Model family to train
    #[arg(long, value_name = "cnn|vit|swin", value_parser = parse_family)]
    family: ModelFamily,

    /// Dataset directory (as produced by generate) or its manifest.json
    #[arg(long, value_name = "PATH")]
    data: PathBuf,

    /// Training-set size after dihedral augmentation, in items; 0 disables
    /// augmentation [default: 3x the dataset size]
    #[arg(long, value_name = "N")]
    augment_to: Option<usize>,

    /// Seed driving the split, shuffling, augmentation, and initialization
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,

    /// Adam learning rate
    #[arg(long, value_name = "RATE", default_value_t = 1e-3)]
    lr: f64,

    /// Minibatch size in items
    #[arg(long, value_name = "N", default_value_t = 32)]
    batch: usize,

    /// Epoch cap; early stopping may end the run sooner
    #[arg(long, value_name = "N", default_value_t = 200)]
    epochs: usize,

    /// Consecutive epochs without a validation improvement before stopping
    #[arg(long, value_name = "N", default_value_t = 10)]
    patience: usize,

    /// Fraction of each label group held out for validation, in (0, 0.5]
    #[arg(long, value_name = "FRAC", default_value_t = 0.2)]
    val_fraction: f64,

    /// Output checkpoint directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Overwrite a recorded run already in the output directory
    #[arg(long)]
    force: bool,
}

impl TrainArgs {
    fn resolve(self) -> Result<(CommandConfig, PathBuf, bool)> {
        let data = runner::resolve_dataset(&self.data)?;
        let augment_target = match self.augment_to {
            Some(0) => None,
            Some(n) => Some(n),
            None => Some(3 * DatasetManifest::read_file(&data)?.items.len()),
        };
        let train = TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            patience: self.patience,
            augment_target,
            val_fraction: self.val_fraction,
            seed: self.seed,
        };
        Ok((CommandConfig::Train { family: self.family, data, train }, self.out, self.force))
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Nonstationarity type to probe: 1 (ranges beyond a third of the
    /// extent) or 2 (range x trend-proportion sweep)
    #[arg(long = "type", value_name = "1|2", value_parser = clap::value_parser!(u8).range(1..=2))]
    bench_type: u8,

    /// Checkpoint directory of the model under test
    #[arg(long, value_name = "CKPT")]
    model: PathBuf,

    /// Checkpoint directory to compare against; adds baseline/ outputs and
    /// improvements.csv with bootstrap confidence intervals
    #[arg(long, value_name = "CKPT")]
    baseline: Option<PathBuf>,

    /// Cell size of the simulated evaluation grids in meters
    #[arg(long, value_name = "M", default_value_t = 5.0)]
    cell_size: f64,

    /// Comma-separated variogram ranges in meters [default: 400-1000 m step
    /// 100 for type 1, 40-400 m step 30 for type 2, scaled to the model]
    #[arg(long, value_name = "M,M,...", value_delimiter = ',')]
    ranges: Option<Vec<f64>>,

    /// Comma-separated trend variance proportions in [0, 0.9]; type 2 only
    /// [default: 0.2,0.5,0.8]
    #[arg(long, value_name = "P,P,...", value_delimiter = ',')]
    proportions: Option<Vec<f64>>,

    /// Realizations per setting
    #[arg(long, value_name = "N", default_value_t = 20)]
    n: usize,

    /// Base seed for the simulated evaluation items
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,

    /// Variogram model family of the simulated residuals
    #[arg(long, value_name = "spherical|exponential|gaussian", default_value = "spherical", value_parser = parse_variogram)]
    variogram: VariogramKind,

    /// Fixed trend azimuth in degrees clockwise from north; type 2 only
    /// [default: drawn per item from its seed]
    #[arg(long, value_name = "DEG")]
    azimuth: Option<f64>,

    /// Directory for reusing simulated realizations across runs; also read
    /// from the VARIOBENCH_CACHE environment variable
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Output report directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Overwrite a recorded run already in the output directory
    #[arg(long)]
    force: bool,
}

impl BenchmarkArgs {
    fn resolve(self) -> Result<(CommandConfig, PathBuf, bool, Option<PathBuf>)> {
        if self.bench_type == 1 {
            if self.proportions.is_some() {
                return Err(Error::invalid("--proportions only applies to --type 2"));
            }
            if self.azimuth.is_some() {
                return Err(Error::invalid("--azimuth only applies to --type 2"));
            }
        }
        let model = runner::resolve_checkpoint(&self.model)?;
        let baseline = match &self.baseline {
            Some(path) => Some(runner::resolve_checkpoint(path)?),
            None => None,
        };
        let ranges_m = match self.ranges {
            Some(r) => r,
            None => {
                let side = TrainedModel::load(&model)?.spec().input_side();
                runner::scale_ranges(&runner::default_bench_ranges(self.bench_type), side)
            }
        };
        let proportions = if self.bench_type == 2 {
            self.proportions.unwrap_or_else(|| vec![0.2, 0.5, 0.8])
        } else {
            Vec::new()
        };
        let cache_dir = self
            .cache_dir
            .or_else(|| std::env::var_os("VARIOBENCH_CACHE").map(PathBuf::from));
        let cfg = CommandConfig::Benchmark {
            nonstat_type: self.bench_type,
            model,
            baseline,
            cell_size_m: self.cell_size,
            variogram: self.variogram,
            ranges_m,
            proportions,
            n_real: self.n,
            seed: self.seed,
            azimuth_deg: self.azimuth,
        };
        Ok((cfg, self.out, self.force, cache_dir))
    }
}

#[derive(Args)]
struct InspectArgs {
    /// Realization file to inspect
    #[arg(value_name = "FILE")]
    file: PathBuf,

    /// Number of lag bins in the experimental variogram
    #[arg(long, value_name = "N", default_value_t = 30)]
    bins: usize,

    /// Maximum lag in meters [default: half the grid extent]
    #[arg(long, value_name = "M")]
    max_lag: Option<f64>,

    /// Variogram model family to fit
    #[arg(long, value_name = "spherical|exponential|gaussian", default_value = "spherical", value_parser = parse_variogram)]
    variogram: VariogramKind,

    /// Also write the binned variogram to this CSV file
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ImportWeightsArgs {
    /// Weight archive to import (same format train writes)
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,

    /// Model metadata JSON describing the architecture and normalization
    #[arg(long, value_name = "FILE")]
    meta: PathBuf,

    /// Output checkpoint directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Overwrite a recorded run already in the output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    /// A run_manifest.json, or an artifact directory containing one
    #[arg(value_name = "PATH")]
    manifest: PathBuf,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => {
            let (cfg, out, force) = args.resolve()?;
            runner::run_and_record(cfg, &out, force, None)
        }
        Command::Train(args) => {
            let (cfg, out, force) = args.resolve()?;
            runner::run_and_record(cfg, &out, force, None)
        }
        Command::Benchmark(args) => {
            let (cfg, out, force, cache_dir) = args.resolve()?;
            runner::run_and_record(cfg, &out, force, cache_dir.as_deref())
        }
        Command::Inspect(args) => runner::inspect(
            &args.file,
            args.bins,
            args.max_lag,
            args.variogram,
            args.csv.as_deref(),
        ),
        Command::ImportWeights(args) => {
            let cfg = CommandConfig::ImportWeights { weights: args.weights, meta: args.meta };
            runner::run_and_record(cfg, &args.out, args.force, None)
        }
        Command::Reproduce(args) => runner::reproduce(&args.manifest),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
