//! Relative-error metrics, benchmark sweeps over nonstationary settings,
//! and plot-ready report emission.
//!
//! Benchmarks regenerate their test realizations from seeds derived off the
//! base seed, so a report is a pure function of (predictor, grid, settings,
//! seed); an optional cache directory avoids repeating the simulation work.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, NonstatType, Realization};
use crate::models::TrainedModel;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sgs::{generate_item, DatasetKind, GenerateOptions};
use crate::variogram::{fitted_range_of, VariogramKind};
use crate::{Error, Result};

/// Signed relative prediction error `(y − ŷ)/y`.
///
/// Positive values are under-predictions. `y` must be a positive true range.
pub fn relative_error(y: f64, y_hat: f64) -> Result<f64> {
    if !(y.is_finite() && y > 0.0) {
        return Err(Error::invalid(format!(
            "relative error needs a positive true range, got {y}"
        )));
    }
    if !y_hat.is_finite() {
        return Err(Error::Numeric(format!("non-finite prediction {y_hat}")));
    }
    Ok((y - y_hat) / y)
}

/// Anything that maps a realization to a predicted variogram range.
pub trait RangePredictor: Sync {
    fn predict(&self, r: &Realization) -> Result<f64>;
}

impl RangePredictor for TrainedModel {
    fn predict(&self, r: &Realization) -> Result<f64> {
        self.predict_range(r)
    }
}

/// Baseline predictor: fits a variogram model to the experimental
/// semivariogram and reads off the range.
///
/// `sill = None` fits against each realization's sample variance, which is
/// where a single realization's experimental variogram actually plateaus.
#[derive(Clone, Copy, Debug)]
pub struct VariogramOracle {
    pub kind: VariogramKind,
    pub sill: Option<f64>,
}

impl Default for VariogramOracle {
    fn default() -> Self {
        VariogramOracle { kind: VariogramKind::Spherical, sill: None }
    }
}

impl RangePredictor for VariogramOracle {
    fn predict(&self, r: &Realization) -> Result<f64> {
        fitted_range_of(r, self.kind, self.sill)
    }
}

/// One benchmark prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// True range `y` in meters.
    pub range_m: f64,
    pub trend_proportion: f64,
    /// Seed the test realization was generated from.
    pub seed: u64,
    pub nonstat_type: NonstatType,
    /// Predicted range `ŷ` in meters.
    pub predicted_m: f64,
    /// Signed `(y − ŷ)/y`.
    pub relative_error: f64,
}

/// Five-number box-plot summary with 1.5·IQR whiskers.
///
/// Quantiles interpolate linearly between order statistics; whiskers sit on
/// the most extreme observations within 1.5·IQR of the quartiles, and
/// everything beyond them is listed as an outlier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of an ascending-sorted sample.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    /// Summarizes a non-empty sample.
    pub fn from_sample(values: &[f64]) -> Result<BoxStats> {
        if values.is_empty() {
            return Err(Error::invalid("box statistics need at least one value"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample value {bad}")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = sorted_quantile(&sorted, 0.25);
        let median = sorted_quantile(&sorted, 0.5);
        let q3 = sorted_quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let low_fence = q1 - 1.5 * iqr;
        let high_fence = q3 + 1.5 * iqr;
        let whisker_low = sorted.iter().copied().find(|&v| v >= low_fence).unwrap_or(q1);
        let whisker_high =
            sorted.iter().rev().copied().find(|&v| v <= high_fence).unwrap_or(q3);
        let outliers =
            sorted.iter().copied().filter(|&v| v < low_fence || v > high_fence).collect();
        Ok(BoxStats { n: sorted.len(), q1, median, q3, whisker_low, whisker_high, outliers })
    }
}

/// Error statistics of one benchmark group (a fixed range and proportion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub range_m: f64,
    pub trend_proportion: f64,
    pub n: usize,
    pub mean_signed: f64,
    pub mean_abs: f64,
    /// Box summary of the signed errors.
    pub signed: BoxStats,
    /// Box summary of the absolute errors.
    pub absolute: BoxStats,
}

/// Mean errors over a (range × trend proportion) sweep, row-major by range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub ranges: Vec<f64>,
    pub proportions: Vec<f64>,
    pub mean_abs: Vec<f64>,
    pub mean_signed: Vec<f64>,
}

impl ErrorMatrix {
    /// Mean absolute relative error at (range index, proportion index).
    pub fn abs_at(&self, ri: usize, pi: usize) -> f64 {
        self.mean_abs[ri * self.proportions.len() + pi]
    }

    /// Mean signed relative error at (range index, proportion index).
    pub fn signed_at(&self, ri: usize, pi: usize) -> f64 {
        self.mean_signed[ri * self.proportions.len() + pi]
    }
}

/// Everything a benchmark run produces: per-item records, per-group box
/// statistics, and (for trend sweeps) the mean-error matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub groups: Vec<GroupStats>,
    pub matrix: Option<ErrorMatrix>,
}

/// Generation settings shared by the benchmark sweeps.
#[derive(Clone, Debug)]
pub struct BenchmarkOptions {
    /// Variogram family of the simulated residuals.
    pub variogram: VariogramKind,
    /// Fixed trend azimuth in degrees; `None` draws one per item.
    pub azimuth_deg: Option<f64>,
    /// Directory for reusing generated realizations across runs.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            variogram: VariogramKind::Spherical,
            azimuth_deg: None,
            cache_dir: None,
        }
    }
}

/// Returns the benchmark realization for one (setting, replicate) slot,
/// reusing a cached file when its label checks out.
fn benchmark_item(
    grid: GridSpec,
    kind: DatasetKind,
    range_m: f64,
    proportion: f64,
    opts: &BenchmarkOptions,
    seed: u64,
) -> Result<Realization> {
    let gen_opts = GenerateOptions {
        kind: opts.variogram,
        azimuth_deg: opts.azimuth_deg,
        force: false,
    };
    let cached = opts.cache_dir.as_ref().map(|dir| {
        dir.join(format!(
            "{kind}_{}x{}_{}_{}_{}_{}_{seed:016x}.gsr",
            grid.nx, grid.ny, grid.cell_size, opts.variogram, range_m, proportion
        ))
    });
    if let Some(path) = &cached {
        if path.exists() {
            let r = Realization::read_file(path)?;
            if r.grid == grid
                && r.label.range_m == range_m
                && r.label.seed == seed
                && (kind != DatasetKind::Type2 || r.label.trend_proportion == proportion)
            {
                return Ok(r);
            }
        }
    }
    let r = generate_item(grid, kind, range_m, proportion, &gen_opts, seed)?;
    if let Some(path) = &cached {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        r.write_file(path)?;
    }
    Ok(r)
}

fn run_sweep(
    predictor: &dyn RangePredictor,
    grid: GridSpec,
    kind: DatasetKind,
    settings: &[(f64, f64)],
    n_real: usize,
    base_seed: u64,
    opts: &BenchmarkOptions,
) -> Result<Vec<EvalRecord>> {
    grid.validate()?;
    if settings.is_empty() {
        return Err(Error::invalid("benchmark needs at least one setting"));
    }
    if n_real == 0 {
        return Err(Error::invalid("benchmark needs at least one replicate per setting"));
    }
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..n_real).map(move |rep| (s, rep)))
        .collect();
    jobs.par_iter()
        .map(|&(s_idx, rep)| {
            let (range_m, proportion) = settings[s_idx];
            let seed = derive_seed(base_seed, s_idx as u64, rep as u64);
            let r = benchmark_item(grid, kind, range_m, proportion, opts, seed)?;
            let predicted_m = predictor.predict(&r)?;
            Ok(EvalRecord {
                range_m,
                trend_proportion: r.label.trend_proportion,
                seed,
                nonstat_type: r.label.nonstat_type,
                predicted_m,
                relative_error: relative_error(range_m, predicted_m)?,
            })
        })
        .collect()
}

/// Builds group statistics for consecutive `n_real`-sized chunks of records,
/// which is exactly the layout [`run_sweep`] emits.
fn group_records(records: &[EvalRecord], n_real: usize) -> Result<Vec<GroupStats>> {
    records
        .chunks(n_real)
        .map(|chunk| {
            let signed: Vec<f64> = chunk.iter().map(|r| r.relative_error).collect();
            let absolute: Vec<f64> = signed.iter().map(|e| e.abs()).collect();
            Ok(GroupStats {
                range_m: chunk[0].range_m,
                trend_proportion: chunk[0].trend_proportion,
                n: chunk.len(),
                mean_signed: signed.iter().sum::<f64>() / signed.len() as f64,
                mean_abs: absolute.iter().sum::<f64>() / absolute.len() as f64,
                signed: BoxStats::from_sample(&signed)?,
                absolute: BoxStats::from_sample(&absolute)?,
            })
        })
        .collect()
}

/// Benchmarks a predictor on long-range (type 1) realizations.
///
/// Generates `n_real` realizations per range from seeds derived off
/// `base_seed`, predicts each, and groups the errors by range in input
/// order. Each range must exceed one-third of the grid extent.
pub fn type1_benchmark(
    predictor: &dyn RangePredictor,
    grid: GridSpec,
    ranges: &[f64],
    n_real: usize,
    base_seed: u64,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    let settings: Vec<(f64, f64)> = ranges.iter().map(|&r| (r, 0.0)).collect();
    let records =
        run_sweep(predictor, grid, DatasetKind::Type1, &settings, n_real, base_seed, opts)?;
    let groups = group_records(&records, n_real)?;
    Ok(EvalReport { records, groups, matrix: None })
}

/// Benchmarks a predictor on the (range × trend proportion) sweep.
///
/// Proportion 0 is plain stationarity; the matrix holds the mean absolute
/// and mean signed relative error per cell, rows in `ranges` order.
pub fn type2_benchmark(
    predictor: &dyn RangePredictor,
    grid: GridSpec,
    ranges: &[f64],
    proportions: &[f64],
    n_real: usize,
    base_seed: u64,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    for &p in proportions {
        if !(p.is_finite() && (0.0..=0.9).contains(&p)) {
            return Err(Error::invalid(format!(
                "trend proportion {p} must lie in [0, 0.9]"
            )));
        }
    }
    let mut settings = Vec::with_capacity(ranges.len() * proportions.len());
    for &r in ranges {
        for &p in proportions {
            settings.push((r, p));
        }
    }
    let records =
        run_sweep(predictor, grid, DatasetKind::Type2, &settings, n_real, base_seed, opts)?;
    let groups = group_records(&records, n_real)?;
    let matrix = ErrorMatrix {
        ranges: ranges.to_vec(),
        proportions: proportions.to_vec(),
        mean_abs: groups.iter().map(|g| g.mean_abs).collect(),
        mean_signed: groups.iter().map(|g| g.mean_signed).collect(),
    };
    Ok(EvalReport { records, groups, matrix: Some(matrix) })
}

/// Per-group difference in mean absolute relative error between two reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub range_m: f64,
    pub trend_proportion: f64,
    /// `mean |e_a|  −  mean |e_b|`; positive means `b` is better.
    pub delta_mean_abs: f64,
    /// 95% bootstrap confidence bounds on the difference.
    pub ci_low: f64,
    pub ci_high: f64,
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Compares two reports group by group: the difference of mean absolute
/// errors with a seeded 1000-resample bootstrap 95% confidence interval.
/// The reports must share their grouping keys exactly.
pub fn compare_models(a: &EvalReport, b: &EvalReport, seed: u64) -> Result<Vec<Improvement>> {
    if a.groups.len() != b.groups.len() {
        return Err(Error::invalid(format!(
            "reports group differently: {} vs {} groups",
            a.groups.len(),
            b.groups.len()
        )));
    }
    for (ga, gb) in a.groups.iter().zip(&b.groups) {
        if ga.range_m.to_bits() != gb.range_m.to_bits()
            || ga.trend_proportion.to_bits() != gb.trend_proportion.to_bits()
        {
            return Err(Error::invalid(format!(
                "grouping keys differ: ({}, {}) vs ({}, {})",
                ga.range_m, ga.trend_proportion, gb.range_m, gb.trend_proportion
            )));
        }
    }

    let errors_of = |report: &EvalReport, g: &GroupStats| -> Vec<f64> {
        report
            .records
            .iter()
            .filter(|r| {
                r.range_m.to_bits() == g.range_m.to_bits()
                    && r.trend_proportion.to_bits() == g.trend_proportion.to_bits()
            })
            .map(|r| r.relative_error.abs())
            .collect()
    };

    a.groups
        .iter()
        .zip(&b.groups)
        .enumerate()
        .map(|(g_idx, (ga, gb))| {
            let ea = errors_of(a, ga);
            let eb = errors_of(b, gb);
            if ea.is_empty() || eb.is_empty() {
                return Err(Error::invalid(format!(
                    "group ({}, {}) has no records",
                    ga.range_m, ga.trend_proportion
                )));
            }
            let mut rng = stream_rng(derive_seed(seed, g_idx as u64, 0), Stream::Bootstrap);
            let mut deltas = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
            for _ in 0..BOOTSTRAP_RESAMPLES {
                let ma = (0..ea.len())
                    .map(|_| ea[rng.random_range(0..ea.len())])
                    .sum::<f64>()
                    / ea.len() as f64;
                let mb = (0..eb.len())
                    .map(|_| eb[rng.random_range(0..eb.len())])
                    .sum::<f64>()
                    / eb.len() as f64;
                deltas.push(ma - mb);
            }
            deltas.sort_by(f64::total_cmp);
            Ok(Improvement {
                range_m: ga.range_m,
                trend_proportion: ga.trend_proportion,
                delta_mean_abs: ga.mean_abs - gb.mean_abs,
                ci_low: sorted_quantile(&deltas, 0.025),
                ci_high: sorted_quantile(&deltas, 0.975),
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes a report as plot-ready files: `records.csv`, `groups.csv`,
/// `matrix_mean_abs.csv` / `matrix_mean_signed.csv` (when a matrix is
/// present), and `summary.json`. Emission is a pure function of the report,
/// so re-emitting produces byte-identical files.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut records = String::from(
        "range_m,trend_proportion,seed,nonstat_type,predicted_m,relative_error\n",
    );
    for r in &report.records {
        records.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.range_m, r.trend_proportion, r.seed, r.nonstat_type, r.predicted_m, r.relative_error
        ));
    }
    write_text(&out_dir.join("records.csv"), &records)?;

    let mut groups = String::from(
        "range_m,trend_proportion,n,mean_signed,mean_abs,\
         signed_q1,signed_median,signed_q3,signed_whisker_low,signed_whisker_high,signed_outliers,\
         abs_q1,abs_median,abs_q3,abs_whisker_low,abs_whisker_high,abs_outliers\n",
    );
    for g in &report.groups {
        groups.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            g.range_m,
            g.trend_proportion,
            g.n,
            g.mean_signed,
            g.mean_abs,
            g.signed.q1,
            g.signed.median,
            g.signed.q3,
            g.signed.whisker_low,
            g.signed.whisker_high,
            g.signed.outliers.len(),
            g.absolute.q1,
            g.absolute.median,
            g.absolute.q3,
            g.absolute.whisker_low,
            g.absolute.whisker_high,
            g.absolute.outliers.len(),
        ));
    }
    write_text(&out_dir.join("groups.csv"), &groups)?;

    if let Some(matrix) = &report.matrix {
        for (file, data) in [
            ("matrix_mean_abs.csv", &matrix.mean_abs),
            ("matrix_mean_signed.csv", &matrix.mean_signed),
        ] {
            let mut text = String::from("range_m");
            for p in &matrix.proportions {
                text.push_str(&format!(",{p}"));
            }
            text.push('\n');
            for (ri, r) in matrix.ranges.iter().enumerate() {
                text.push_str(&format!("{r}"));
                for pi in 0..matrix.proportions.len() {
                    text.push_str(&format!(",{}", data[ri * matrix.proportions.len() + pi]));
                }
                text.push('\n');
            }
            write_text(&out_dir.join(file), &text)?;
        }
    }

    let p = out_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::json(p.display().to_string(), e))?;
    json.push('\n');
    write_text(&p, &json)
}

/// Reads a matrix CSV written by [`emit_report`] back into
/// `(proportions, ranges, row-major cells)`. Values round-trip exactly.
pub fn parse_matrix_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty matrix CSV"))?;
    let proportions: Vec<f64> = header
        .split(',')
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad header cell {s:?}"))))
        .collect::<Result<_>>()?;
    let mut ranges = Vec::new();
    let mut cells = Vec::new();
    for line in lines {
        let mut fields = line.split(',');
        let range = fields
            .next()
            .ok_or_else(|| Error::invalid("short matrix row"))?
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad range cell in {line:?}")))?;
        ranges.push(range);
        let row: Vec<f64> = fields
            .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad cell {s:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != proportions.len() {
            return Err(Error::invalid(format!(
                "matrix row has {} cells, expected {}",
                row.len(),
                proportions.len()
            )));
        }
        cells.extend(row);
    }
    Ok((proportions, ranges, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_follows_the_sign_convention() {
        assert_eq!(relative_error(500.0, 450.0).unwrap(), 0.1);
        assert_eq!(relative_error(300.0, 300.0).unwrap(), 0.0);
        assert_eq!(relative_error(100.0, 120.0).unwrap(), -0.2);
        assert!(relative_error(0.0, 10.0).is_err());
        assert!(relative_error(-5.0, 10.0).is_err());
        assert!(relative_error(5.0, f64::NAN).is_err());

        for y in [0.5, 40.0, 1000.0, 3.7e5] {
            for e in [-0.8, -0.1, 0.0, 0.3, 0.99] {
                let got = relative_error(y, y * (1.0 - e)).unwrap();
                assert!((got - e).abs() < 1e-12, "y={y} e={e} got {got}");
            }
        }
    }

    #[test]
    fn box_stats_match_hand_computed_quartiles() {
        let s = BoxStats::from_sample(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q3, 3.25);
        assert_eq!(s.whisker_low, 1.0);
        assert_eq!(s.whisker_high, 4.0);
        assert!(s.outliers.is_empty());

        let v: Vec<f64> = (1..=9).map(f64::from).chain([100.0]).collect();
        let s = BoxStats::from_sample(&v).unwrap();
        assert_eq!(s.q1, 3.25);
        assert_eq!(s.median, 5.5);
        assert_eq!(s.q3, 7.75);
        assert_eq!(s.whisker_low, 1.0);
        assert_eq!(s.whisker_high, 9.0);
        assert_eq!(s.outliers, vec![100.0]);

        let single = BoxStats::from_sample(&[2.5]).unwrap();
        assert_eq!(single.median, 2.5);
        assert_eq!(single.whisker_low, 2.5);
        assert_eq!(single.whisker_high, 2.5);

        assert!(BoxStats::from_sample(&[]).is_err());
        assert!(BoxStats::from_sample(&[f64::NAN]).is_err());
    }

    #[test]
    fn box_stats_match_a_brute_force_reference() {
        let values: Vec<f64> = (0..37)
            .map(|i| {
                let h = crate::rng::splitmix64(0xb0b0 + i);
                (h as f64 / u64::MAX as f64) * 10.0 - 3.0
            })
            .collect();
        let s = BoxStats::from_sample(&values).unwrap();

        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let brute = |q: f64| -> f64 {
            let pos = q * (sorted.len() - 1) as f64;
            let (i, frac) = (pos as usize, pos.fract());
            if frac == 0.0 {
                sorted[i]
            } else {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            }
        };
        assert!((s.q1 - brute(0.25)).abs() < 1e-12);
        assert!((s.median - brute(0.5)).abs() < 1e-12);
        assert!((s.q3 - brute(0.75)).abs() < 1e-12);

        let iqr = s.q3 - s.q1;
        let inside: Vec<f64> = sorted
            .iter()
            .copied()
            .filter(|&v| v >= s.q1 - 1.5 * iqr && v <= s.q3 + 1.5 * iqr)
            .collect();
        assert_eq!(s.whisker_low, inside[0]);
        assert_eq!(s.whisker_high, *inside.last().unwrap());
        assert_eq!(s.outliers.len(), sorted.len() - inside.len());
    }

    /// Predicts a fixed fraction of the true range, ignoring the image.
    struct Scaled(f64);

    impl RangePredictor for Scaled {
        fn predict(&self, r: &Realization) -> Result<f64> {
            Ok(r.label.range_m * self.0)
        }
    }

    fn bench_grid() -> GridSpec {
        GridSpec::new(16, 16, 5.0).unwrap()
    }

    #[test]
    fn type1_sweep_passes_known_errors_through() {
        let opts = BenchmarkOptions::default();
        let report =
            type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0, 40.0], 3, 11, &opts).unwrap();
        assert_eq!(report.records.len(), 6);
        assert_eq!(report.groups.len(), 2);
        assert!(report.matrix.is_none());
        for g in &report.groups {
            assert_eq!(g.n, 3);
            assert!((g.mean_abs - 0.1).abs() < 1e-12);
            assert!((g.mean_signed - 0.1).abs() < 1e-12);
        }
        assert_eq!(report.groups[0].range_m, 30.0);
        assert_eq!(report.groups[1].range_m, 40.0);
        for r in &report.records {
            assert_eq!(r.nonstat_type, NonstatType::Type1);
            assert_eq!(
                r.relative_error,
                relative_error(r.range_m, r.predicted_m).unwrap()
            );
        }

        let again =
            type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0, 40.0], 3, 11, &opts).unwrap();
        assert_eq!(report, again);

        let shifted =
            type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0, 40.0], 3, 12, &opts).unwrap();
        assert_ne!(report.records[0].seed, shifted.records[0].seed);
    }

    #[test]
    fn type2_sweep_builds_the_error_matrix() {
        let opts = BenchmarkOptions::default();
        let report = type2_benchmark(
            &Scaled(0.8),
            bench_grid(),
            &[30.0, 40.0],
            &[0.0, 0.5],
            2,
            3,
            &opts,
        )
        .unwrap();
        assert_eq!(report.records.len(), 8);
        assert_eq!(report.groups.len(), 4);
        let matrix = report.matrix.as_ref().unwrap();
        assert_eq!(matrix.ranges, vec![30.0, 40.0]);
        assert_eq!(matrix.proportions, vec![0.0, 0.5]);
        assert_eq!(matrix.mean_abs.len(), 4);
        for ri in 0..2 {
            for pi in 0..2 {
                assert!((matrix.abs_at(ri, pi) - 0.2).abs() < 1e-12);
                assert!((matrix.signed_at(ri, pi) - 0.2).abs() < 1e-12);
            }
        }
        for r in &report.records {
            assert_eq!(r.nonstat_type, NonstatType::Type2);
        }

        assert!(type2_benchmark(
            &Scaled(0.8),
            bench_grid(),
            &[30.0],
            &[0.95],
            2,
            3,
            &opts
        )
        .is_err());
    }

    #[test]
    fn proportion_zero_items_match_stationary_simulation() {
        let opts = GenerateOptions::default();
        let stationary =
            generate_item(bench_grid(), DatasetKind::Train, 30.0, 0.0, &opts, 99).unwrap();
        let trended =
            generate_item(bench_grid(), DatasetKind::Type2, 30.0, 0.0, &opts, 99).unwrap();
        assert!(stationary
            .values
            .iter()
            .zip(&trended.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(trended.label.nonstat_type, NonstatType::Type2);
        assert_eq!(trended.label.trend_proportion, 0.0);
    }

    #[test]
    fn benchmark_cache_is_reused_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BenchmarkOptions {
            cache_dir: Some(dir.path().to_path_buf()),
            ..BenchmarkOptions::default()
        };
        let first =
            type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0], 2, 5, &opts).unwrap();
        let n_files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(n_files, 2);
        let second =
            type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0], 2, 5, &opts).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);

        let uncached = type1_benchmark(
            &Scaled(0.9),
            bench_grid(),
            &[30.0],
            2,
            5,
            &BenchmarkOptions::default(),
        )
        .unwrap();
        assert_eq!(first, uncached);
    }

    #[test]
    fn self_comparison_reports_zero_improvement() {
        let opts = BenchmarkOptions::default();
        let a = type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0, 40.0], 4, 2, &opts).unwrap();
        let table = compare_models(&a, &a, 7).unwrap();
        assert_eq!(table.len(), 2);
        for row in &table {
            assert_eq!(row.delta_mean_abs, 0.0);
            assert!(row.ci_low <= 0.0 && 0.0 <= row.ci_high);
        }
        let again = compare_models(&a, &a, 7).unwrap();
        assert_eq!(table, again);

        let b = type1_benchmark(&Scaled(0.9), bench_grid(), &[30.0, 50.0], 4, 2, &opts).unwrap();
        assert!(compare_models(&a, &b, 7).is_err());
    }

    #[test]
    fn a_better_predictor_shows_positive_improvement() {
        let opts = BenchmarkOptions::default();
        let worse = type1_benchmark(&Scaled(0.7), bench_grid(), &[30.0], 5, 2, &opts).unwrap();
        let better = type1_benchmark(&Scaled(0.95), bench_grid(), &[30.0], 5, 2, &opts).unwrap();
        let table = compare_models(&worse, &better, 1).unwrap();
        assert_eq!(table.len(), 1);
        assert!((table[0].delta_mean_abs - 0.25).abs() < 1e-12);
        assert!(table[0].ci_low > 0.0);
    }

    #[test]
    fn report_emission_is_deterministic_and_parses_back() {
        let opts = BenchmarkOptions::default();
        let report = type2_benchmark(
            &Scaled(0.8),
            bench_grid(),
            &[30.0, 40.0],
            &[0.0, 0.3],
            2,
            3,
            &opts,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report");
        emit_report(&report, &out).unwrap();

        let records = fs::read_to_string(out.join("records.csv")).unwrap();
        assert_eq!(records.lines().count(), 1 + report.records.len());
        let groups = fs::read_to_string(out.join("groups.csv")).unwrap();
        assert_eq!(groups.lines().count(), 1 + report.groups.len());

        let matrix = report.matrix.as_ref().unwrap();
        let (props, ranges, cells) =
            parse_matrix_csv(&out.join("matrix_mean_abs.csv")).unwrap();
        assert_eq!(props, matrix.proportions);
        assert_eq!(ranges, matrix.ranges);
        assert_eq!(cells, matrix.mean_abs);
        let (_, _, signed) = parse_matrix_csv(&out.join("matrix_mean_signed.csv")).unwrap();
        assert_eq!(signed, matrix.mean_signed);

        let summary: EvalReport =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, report);

        let mut before = Vec::new();
        for f in ["records.csv", "groups.csv", "matrix_mean_abs.csv", "summary.json"] {
            before.push(fs::read(out.join(f)).unwrap());
        }
        emit_report(&report, &out).unwrap();
        for (f, old) in
            ["records.csv", "groups.csv", "matrix_mean_abs.csv", "summary.json"].iter().zip(before)
        {
            assert_eq!(fs::read(out.join(f)).unwrap(), old, "{f} changed on re-emission");
        }
    }

    #[test]
    fn oracle_predictor_recovers_range_at_small_scale() {
        let grid = GridSpec::new(48, 48, 5.0).unwrap();
        let item = generate_item(
            grid,
            DatasetKind::Train,
            60.0,
            0.0,
            &GenerateOptions::default(),
            17,
        )
        .unwrap();
        let fitted = VariogramOracle::default().predict(&item).unwrap();
        let err = relative_error(60.0, fitted).unwrap().abs();
        assert!(err < 0.5, "oracle fitted {fitted} for true 60, |err| {err}");
    }
}
