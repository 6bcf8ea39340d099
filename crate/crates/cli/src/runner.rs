//! Executes resolved commands, records run manifests, and replays them.

use std::fs;
use std::path::{Path, PathBuf};

use variobench_core::evaluation::{
    compare_models, emit_report, type1_benchmark, type2_benchmark, BenchmarkOptions, EvalReport,
    Improvement,
};
use variobench_core::grid::GridSpec;
use variobench_core::models::{ModelFamily, ModelSpec, TrainedModel, DESK_SIDE, FULL_SIDE};
use variobench_core::rng::derive_seed;
use variobench_core::sgs::{generate_dataset, planar_trend_fraction};
use variobench_core::training::{load_dataset, train};
use variobench_core::variogram::{default_max_lag, experimental_semivariogram, fit_range};
use variobench_core::{Error, GenerateOptions, Realization, Result, VariogramKind};

use crate::manifest::{
    digest_outputs, file_digest, CommandConfig, RunManifest, FORMAT_VERSION, MANIFEST_FILE,
};

/// Resolves a `--data` argument to the dataset manifest file: either the
/// manifest itself or a dataset directory containing `manifest.json`.
pub fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if !manifest.is_file() {
        return Err(Error::invalid(format!(
            "{}: no dataset manifest here; point --data at a dataset directory or its manifest.json",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Resolves a checkpoint argument to its directory: either the directory
/// itself or one of the two files inside it.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let dir = if path.is_file() {
        path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    };
    for file in [variobench_core::models::WEIGHTS_FILE, variobench_core::models::META_FILE] {
        if !dir.join(file).is_file() {
            return Err(Error::invalid(format!(
                "{}: not a checkpoint directory (missing {file})",
                dir.display()
            )));
        }
    }
    Ok(dir)
}

/// Built-in model preset matching a dataset's grid.
fn preset_for(family: ModelFamily, grid: &GridSpec) -> Result<ModelSpec> {
    if grid.nx != grid.ny {
        return Err(Error::invalid(format!(
            "models take square inputs; the dataset grid is {}x{}",
            grid.nx, grid.ny
        )));
    }
    match grid.nx {
        FULL_SIDE => Ok(ModelSpec::full(family)),
        DESK_SIDE => Ok(ModelSpec::desk(family)),
        other => Err(Error::invalid(format!(
            "no {family} preset for {other}x{other} grids; expected {DESK_SIDE}x{DESK_SIDE} or {FULL_SIDE}x{FULL_SIDE}"
        ))),
    }
}

/// Files a command consumes, for digest capture and verification.
fn input_files(cfg: &CommandConfig) -> Result<Vec<PathBuf>> {
    match cfg {
        CommandConfig::Generate { .. } => Ok(Vec::new()),
        CommandConfig::Train { data, .. } => {
            let manifest = variobench_core::DatasetManifest::read_file(data)?;
            let dir = data.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
            let mut files = vec![data.clone()];
            files.extend(manifest.items.iter().map(|item| dir.join(&item.file)));
            Ok(files)
        }
        CommandConfig::Benchmark { model, baseline, .. } => {
            let mut files = Vec::new();
            for dir in std::iter::once(model).chain(baseline.iter()) {
                files.push(dir.join(variobench_core::models::WEIGHTS_FILE));
                files.push(dir.join(variobench_core::models::META_FILE));
            }
            Ok(files)
        }
        CommandConfig::ImportWeights { weights, meta } => {
            Ok(vec![weights.clone(), meta.clone()])
        }
    }
}

/// Runs a command into `out_dir`. The caller owns directory hygiene; the
/// realization cache is an execution detail and is never recorded.
fn execute(cfg: &CommandConfig, out_dir: &Path, cache_dir: Option<&Path>) -> Result<()> {
    match cfg {
        CommandConfig::Generate {
            kind,
            nx,
            ny,
            cell_size_m,
            variogram,
            ranges_m,
            proportions,
            count,
            seed,
            azimuth_deg,
        } => {
            let grid = GridSpec::new(*nx, *ny, *cell_size_m)?;
            let opts = GenerateOptions {
                kind: *variogram,
                azimuth_deg: *azimuth_deg,
                force: true,
            };
            let manifest =
                generate_dataset(grid, *kind, ranges_m, proportions, *count, *seed, out_dir, &opts)?;
            println!(
                "generated {} {} items on a {}x{} grid into {}",
                manifest.items.len(),
                kind,
                nx,
                ny,
                out_dir.display()
            );
            Ok(())
        }
        CommandConfig::Train { family, data, train: cfg } => {
            let (manifest, items) = load_dataset(data)?;
            let spec = preset_for(*family, &manifest.grid)?;
            let model = train(&spec, &items, cfg)?;
            model.save(out_dir)?;
            let history = model.history();
            let best = history.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
            println!(
                "trained {family} on {} items: {} epochs (best {best}), {} parameters, saved to {}",
                items.len(),
                history.epochs.len(),
                model.param_count(),
                out_dir.display()
            );
            Ok(())
        }
        CommandConfig::Benchmark {
            nonstat_type,
            model,
            baseline,
            cell_size_m,
            variogram,
            ranges_m,
            proportions,
            n_real,
            seed,
            azimuth_deg,
        } => {
            if !matches!(nonstat_type, 1 | 2) {
                return Err(Error::invalid(format!(
                    "nonstationarity type {nonstat_type} is not supported; expected 1 or 2"
                )));
            }
            let trained = TrainedModel::load(model)?;
            let side = trained.spec().input_side();
            let grid = GridSpec::new(side, side, *cell_size_m)?;
            let opts = BenchmarkOptions {
                variogram: *variogram,
                azimuth_deg: *azimuth_deg,
                cache_dir: cache_dir.map(Path::to_path_buf),
            };
            let run = |m: &TrainedModel| -> Result<EvalReport> {
                match nonstat_type {
                    1 => type1_benchmark(m, grid, ranges_m, *n_real, *seed, &opts),
                    _ => type2_benchmark(m, grid, ranges_m, proportions, *n_real, *seed, &opts),
                }
            };
            let report = run(&trained)?;
            emit_report(&report, out_dir)?;
            print_report(&report);
            if let Some(dir) = baseline {
                let other = TrainedModel::load(dir)?;
                let other_report = run(&other)?;
                emit_report(&other_report, &out_dir.join("baseline"))?;
                let improvements =
                    compare_models(&other_report, &report, derive_seed(*seed, 101, 0))?;
                write_improvements(&improvements, &out_dir.join("improvements.csv"))?;
                print_improvements(&improvements);
            }
            Ok(())
        }
        CommandConfig::ImportWeights { weights, meta } => {
            let model = TrainedModel::load_files(weights, meta)?;
            model.save(out_dir)?;
            println!(
                "imported {} checkpoint ({} parameters) into {}",
                model.family(),
                model.param_count(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn print_report(report: &EvalReport) {
    println!(
        "{:>10}  {:>5}  {:>4}  {:>13}  {:>13}",
        "range_m", "p", "n", "mean|rel err|", "mean rel err"
    );
    for g in &report.groups {
        println!(
            "{:>10.3}  {:>5.2}  {:>4}  {:>13.4}  {:>+13.4}",
            g.range_m, g.trend_proportion, g.n, g.mean_abs, g.mean_signed
        );
    }
    let overall = report.records.iter().map(|r| r.relative_error.abs()).sum::<f64>()
        / report.records.len().max(1) as f64;
    println!("overall mean |relative error|: {overall:.4} over {} items", report.records.len());
}

fn print_improvements(improvements: &[Improvement]) {
    println!("improvement over baseline in mean |relative error| (positive favors the model):");
    println!("{:>10}  {:>5}  {:>9}  {:>22}", "range_m", "p", "delta", "95% bootstrap CI");
    for imp in improvements {
        println!(
            "{:>10.3}  {:>5.2}  {:>+9.4}  [{:>+8.4}, {:>+8.4}]",
            imp.range_m, imp.trend_proportion, imp.delta_mean_abs, imp.ci_low, imp.ci_high
        );
    }
}

fn write_improvements(improvements: &[Improvement], path: &Path) -> Result<()> {
    let mut text = String::from("range_m,trend_proportion,delta_mean_abs,ci_low,ci_high\n");
    for imp in improvements {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            imp.range_m, imp.trend_proportion, imp.delta_mean_abs, imp.ci_low, imp.ci_high
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Refuses to clobber a previously recorded run unless forced, then makes
/// sure the output directory exists.
fn prepare_out_dir(out_dir: &Path, force: bool) -> Result<()> {
    if out_dir.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::invalid(format!(
            "{} already holds a recorded run; pass --force to overwrite",
            out_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))
}

/// Runs a command and records its manifest in the output directory.
pub fn run_and_record(
    cfg: CommandConfig,
    out_dir: &Path,
    force: bool,
    cache_dir: Option<&Path>,
) -> Result<()> {
    prepare_out_dir(out_dir, force)?;
    let mut inputs = std::collections::BTreeMap::new();
    for file in input_files(&cfg)? {
        inputs.insert(file.display().to_string(), file_digest(&file)?);
    }
    execute(&cfg, out_dir, cache_dir)?;
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        argv: std::env::args().skip(1).collect(),
        base_seed: cfg.base_seed(),
        command: cfg,
        inputs,
        outputs: digest_outputs(out_dir)?,
    };
    manifest.write_file(&out_dir.join(MANIFEST_FILE))
}

/// Replays a recorded run into a scratch directory and verifies that every
/// output digest matches. Inputs are checked first; the realization cache is
/// disabled so nothing can mask a generation change.
pub fn reproduce(path: &Path) -> Result<()> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest = RunManifest::read_file(&manifest_path)?;
    if manifest.tool_version != env!("CARGO_PKG_VERSION") {
        println!(
            "note: run was recorded by version {}, replaying with {}",
            manifest.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    for (file, digest) in &manifest.inputs {
        if &file_digest(Path::new(file))? != digest {
            return Err(Error::invalid(format!(
                "input {file} changed since the run was recorded (digest mismatch)"
            )));
        }
    }
    let scratch = tempfile::tempdir()
        .map_err(|e| Error::io("scratch directory for reproduction".to_string(), e))?;
    execute(&manifest.command, scratch.path(), None)?;
    let fresh = digest_outputs(scratch.path())?;

    let mut clean = true;
    for (file, want) in &manifest.outputs {
        match fresh.get(file) {
            Some(got) if got == want => println!("ok        {file}"),
            Some(_) => {
                clean = false;
                println!("mismatch  {file}");
            }
            None => {
                clean = false;
                println!("missing   {file}");
            }
        }
    }
    for file in fresh.keys() {
        if !manifest.outputs.contains_key(file) {
            clean = false;
            println!("extra     {file}");
        }
    }
    if clean {
        println!("reproduced {} artifacts byte-identically", manifest.outputs.len());
        Ok(())
    } else {
        Err(Error::invalid("outputs differ from the recorded digests"))
    }
}

/// Prints a realization's label, moment statistics, fitted range, trend
/// fraction, and binned experimental variogram. Read-only: no manifest.
pub fn inspect(
    file: &Path,
    bins: usize,
    max_lag: Option<f64>,
    kind: VariogramKind,
    csv: Option<&Path>,
) -> Result<()> {
    let r = Realization::read_file(file)?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &r.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    println!("file:        {}", file.display());
    println!(
        "grid:        {}x{} cells at {} m ({} m x {} m)",
        r.grid.nx,
        r.grid.ny,
        r.grid.cell_size,
        r.grid.nx as f64 * r.grid.cell_size,
        r.grid.ny as f64 * r.grid.cell_size,
    );
    println!("kind:        {}", r.label.nonstat_type);
    println!("range:       {} m", r.label.range_m);
    println!("proportion:  {}", r.label.trend_proportion);
    println!("seed:        {:#018x}", r.label.seed);
    println!(
        "values:      mean {:+.4}  variance {:.4}  min {lo:+.4}  max {hi:+.4}",
        r.mean(),
        r.variance()
    );
    let max_lag = max_lag.unwrap_or_else(|| default_max_lag(&r.grid));
    let ev = experimental_semivariogram(&r, bins, max_lag)?;
    match fit_range(&ev, kind, r.variance()) {
        Ok(range) => println!("fitted range ({kind}, sill = sample variance): {range:.1} m"),
        Err(e) => println!("fitted range: unavailable ({e})"),
    }
    match planar_trend_fraction(&r) {
        Ok(p) => println!("planar trend fraction: {p:.3}"),
        Err(e) => println!("planar trend fraction: unavailable ({e})"),
    }
    if ev.subsampled {
        println!("note: pair budget exceeded; the variogram uses a seeded pair subsample");
    }
    println!();
    print!("{}", ev.to_csv());
    if let Some(path) = csv {
        ev.write_csv(path)?;
    }
    Ok(())
}

/// Scales the full-size default ranges onto a model's input grid.
pub fn scale_ranges(base: &[f64], side: usize) -> Vec<f64> {
    base.iter().map(|r| r * side as f64 / FULL_SIDE as f64).collect()
}

/// Default benchmark ranges for a nonstationarity type at full scale.
pub fn default_bench_ranges(nonstat_type: u8) -> Vec<f64> {
    match nonstat_type {
        1 => (4..=10).map(|k| 100.0 * k as f64).collect(),
        _ => default_train_ranges(),
    }
}

/// Default training-set ranges at full scale, in meters.
pub fn default_train_ranges() -> Vec<f64> {
    (0..13).map(|k| 40.0 + 30.0 * k as f64).collect()
}

/// Default type-1 generation ranges at full scale, in meters.
pub fn default_type1_ranges() -> Vec<f64> {
    default_bench_ranges(1)
}
