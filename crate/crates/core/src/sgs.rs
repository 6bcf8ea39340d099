//! Sequential Gaussian simulation and dataset generation.
//!
//! Simulation visits cells along a seeded random path; each cell receives a
//! draw from the Gaussian conditional distribution given previously simulated
//! neighbors, with mean and variance from simple kriging against a known zero
//! mean. The whole procedure is sequential and uses tagged PRNG streams, so a
//! configuration maps to exactly one realization, bit for bit.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    DatasetManifest, GridSpec, LabelMeta, ManifestItem, NonstatType, Realization,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::variogram::VariogramModel;

/// Configuration of one simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: GridSpec,
    pub model: VariogramModel,
    /// Maximum previously simulated neighbors conditioning each cell.
    pub max_neighbors: usize,
    /// Neighbor search radius in meters.
    pub search_radius: f64,
    pub seed: u64,
}

/// Default conditioning-set size.
pub const DEFAULT_MAX_NEIGHBORS: usize = 16;

impl SimulationConfig {
    /// Builds a config with default neighborhood settings: 16 neighbors
    /// within the model range (never less than four cell sizes).
    pub fn new(grid: GridSpec, model: VariogramModel, seed: u64) -> Result<Self> {
        let cfg = SimulationConfig {
            grid,
            model,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            search_radius: model.range_m.max(4.0 * grid.cell_size),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks configuration invariants.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.max_neighbors == 0 {
            return Err(Error::invalid("max_neighbors must be at least 1"));
        }
        if !(self.search_radius.is_finite() && self.search_radius > 0.0) {
            return Err(Error::invalid(format!(
                "search_radius must be positive and finite, got {}",
                self.search_radius
            )));
        }
        Ok(())
    }
}

/// Seeded random visiting order over `n` cells.
///
/// A Fisher–Yates shuffle of `0..n` driven by the path stream of `seed`:
/// for `i` from `n−1` down to `1`, swap position `i` with a uniform draw
/// from `0..=i`.
pub fn random_path(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Path);
    let mut path: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        path.swap(i, j);
    }
    path
}

/// Solves the dense system `A·x = b` in place by LU with partial pivoting.
///
/// `a` is row-major `n×n`. Returns an error when a pivot collapses, which is
/// how degenerate kriging systems (duplicate conditioning points) surface.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let scale = a
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = scale * 1e-12 * n as f64;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val <= tol {
            return Err(Error::SingularSystem(format!(
                "pivot {pivot_val:.3e} at column {col} below tolerance {tol:.3e}"
            )));
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in (col + 1)..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            a[row * n + col] = 0.0;
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut x = b[col];
        for k in (col + 1)..n {
            x -= a[col * n + k] * b[k];
        }
        b[col] = x / a[col * n + col];
    }
    Ok(())
}

/// Simple-kriging estimate at `target` from `(x, y, value)` samples under a
/// known zero mean.
///
/// Returns `(mean, variance)`. With no samples the prior `(0, C(0))` comes
/// back. The kriging variance is clamped to zero when it lands in
/// `[−1e-9, 0)`; anything more negative is reported as a numeric failure.
pub fn simple_kriging(
    samples: &[(f64, f64, f64)],
    target: (f64, f64),
    model: &VariogramModel,
) -> Result<(f64, f64)> {
    let c0 = model.total_sill();
    let n = samples.len();
    if n == 0 {
        return Ok((0.0, c0));
    }
    let mut k_mat = vec![0.0_f64; n * n];
    let mut rhs = vec![0.0_f64; n];
    for i in 0..n {
        k_mat[i * n + i] = c0;
        for j in (i + 1)..n {
            let dx = samples[i].0 - samples[j].0;
            let dy = samples[i].1 - samples[j].1;
            let c = model.covariance((dx * dx + dy * dy).sqrt())?;
            k_mat[i * n + j] = c;
            k_mat[j * n + i] = c;
        }
        let dx = samples[i].0 - target.0;
        let dy = samples[i].1 - target.1;
        rhs[i] = model.covariance((dx * dx + dy * dy).sqrt())?;
    }
    let k_target = rhs.clone();
    solve_dense(&mut k_mat, &mut rhs, n)?;
    let weights = rhs;
    let mut mean = 0.0;
    let mut reduction = 0.0;
    for i in 0..n {
        mean += weights[i] * samples[i].2;
        reduction += weights[i] * k_target[i];
    }
    let variance = c0 - reduction;
    if variance < -1e-9 {
        return Err(Error::Numeric(format!(
            "kriging variance {variance} is negative beyond tolerance"
        )));
    }
    Ok((mean, variance.max(0.0)))
}

/// Relative cell offsets within `radius_cells`, nearest first.
///
/// Ties in squared distance break on `(dy, dx)` so the scan order is fully
/// specified.
fn sorted_offsets(radius_cells: i64) -> Vec<(i64, i64)> {
    let mut offsets = Vec::new();
    let r2 = radius_cells * radius_cells;
    for dy in -radius_cells..=radius_cells {
        for dx in -radius_cells..=radius_cells {
            if dx == 0 && dy == 0 {
                continue;
            }
            if dx * dx + dy * dy <= r2 {
                offsets.push((dx, dy));
            }
        }
    }
    offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    offsets
}

/// Runs sequential Gaussian simulation for `config`.
///
/// The output realization carries a stationary label with the model range
/// and the config seed. Identical configs produce bit-identical values.
pub fn simulate(config: &SimulationConfig) -> Result<Realization> {
    config.validate()?;
    let grid = config.grid;
    let n = grid.n_cells();
    let path = random_path(config.seed, n);
    let mut draw_rng = stream_rng(config.seed, Stream::Draw);

    let radius_cells = (config.search_radius / grid.cell_size).ceil() as i64;
    let radius2 = (config.search_radius / grid.cell_size).powi(2);
    let offsets: Vec<(i64, i64)> = sorted_offsets(radius_cells)
        .into_iter()
        .filter(|&(dx, dy)| (dx * dx + dy * dy) as f64 <= radius2)
        .collect();

    let mut values = vec![0.0_f32; n];
    let mut simulated = vec![false; n];
    let mut samples: Vec<(f64, f64, f64)> = Vec::with_capacity(config.max_neighbors);

    for &cell in &path {
        let ix = (cell % grid.nx) as i64;
        let iy = (cell / grid.nx) as i64;
        let target = grid.cell_coords(cell);
        samples.clear();
        for &(dx, dy) in &offsets {
            let jx = ix + dx;
            let jy = iy + dy;
            if jx < 0 || jy < 0 || jx >= grid.nx as i64 || jy >= grid.ny as i64 {
                continue;
            }
            let j = grid.index(jx as usize, jy as usize);
            if simulated[j] {
                let (x, y) = grid.cell_coords(j);
                samples.push((x, y, values[j] as f64));
                if samples.len() == config.max_neighbors {
                    break;
                }
            }
        }
        let (mean, variance) = simple_kriging(&samples, target, &config.model)?;
        let z: f64 = draw_rng.sample(StandardNormal);
        values[cell] = (mean + variance.sqrt() * z) as f32;
        simulated[cell] = true;
    }

    Realization::new(
        grid,
        values,
        LabelMeta {
            range_m: config.model.range_m,
            trend_proportion: 0.0,
            seed: config.seed,
            nonstat_type: NonstatType::Stationary,
        },
    )
}

/// Parameters of an additive planar trend.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    /// Variance fraction contributed by the trend, in `[0, 1]`.
    pub proportion: f64,
    /// Ramp direction in degrees; `0` ramps along `+x`, `90` along `+y`.
    pub azimuth_deg: f64,
}

/// Mixes a standardized planar ramp into a stationary residual.
///
/// The ramp `t(x, y) = cos(az)·x + sin(az)·y` over cell centers is
/// standardized to zero mean and unit variance, then combined as
/// `√p·t + √(1−p)·r`. The result carries a type-2 label with
/// `trend_proportion = p` and the given seed; `p = 0` returns values
/// bit-identical to the residual.
pub fn add_linear_trend(residual: &Realization, spec: &TrendSpec, seed: u64) -> Result<Realization> {
    if !(spec.proportion.is_finite() && (0.0..=1.0).contains(&spec.proportion)) {
        return Err(Error::invalid(format!(
            "trend proportion must lie in [0, 1], got {}",
            spec.proportion
        )));
    }
    if !spec.azimuth_deg.is_finite() {
        return Err(Error::invalid("trend azimuth must be finite"));
    }
    if residual.label.nonstat_type != NonstatType::Stationary {
        return Err(Error::invalid(format!(
            "trend can only be added to a stationary residual, got {}",
            residual.label.nonstat_type
        )));
    }
    let grid = residual.grid;
    let n = grid.n_cells();
    let az = spec.azimuth_deg.to_radians();
    let (cx, cy) = (az.cos(), az.sin());
    let mut ramp = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = grid.cell_coords(i);
        ramp.push(cx * x + cy * y);
    }
    let mean = ramp.iter().sum::<f64>() / n as f64;
    let var = ramp.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::Numeric("trend ramp is constant over the grid".into()));
    }
    let std = var.sqrt();
    let wt = spec.proportion.sqrt();
    let wr = (1.0 - spec.proportion).sqrt();
    let values: Vec<f32> = (0..n)
        .map(|i| {
            let t = (ramp[i] - mean) / std;
            (wt * t + wr * residual.values[i] as f64) as f32
        })
        .collect();
    Realization::new(
        grid,
        values,
        LabelMeta {
            range_m: residual.label.range_m,
            trend_proportion: spec.proportion,
            seed,
            nonstat_type: NonstatType::Type2,
        },
    )
}

/// Fraction of a field's variance explained by its best-fit plane
/// (ordinary least squares on cell-center coordinates, with intercept).
///
/// For trend-injected fields this re-estimates the trend variance
/// proportion; a pure standardized ramp gives exactly 1.
pub fn planar_trend_fraction(r: &Realization) -> Result<f64> {
    let grid = r.grid;
    let n = grid.n_cells() as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for (i, &v) in r.values.iter().enumerate() {
        let (x, y) = grid.cell_coords(i);
        mx += x;
        my += y;
        mz += v as f64;
    }
    mx /= n;
    my /= n;
    mz /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let (mut sxz, mut syz, mut szz) = (0.0, 0.0, 0.0);
    for (i, &v) in r.values.iter().enumerate() {
        let (x, y) = grid.cell_coords(i);
        let (dx, dy, dz) = (x - mx, y - my, v as f64 - mz);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
        sxz += dx * dz;
        syz += dy * dz;
        szz += dz * dz;
    }
    if szz <= 0.0 {
        return Err(Error::invalid(
            "constant field has no variance for a trend to explain",
        ));
    }
    let det = sxx * syy - sxy * sxy;
    if det <= 0.0 {
        return Err(Error::Numeric("degenerate coordinate geometry".into()));
    }
    let b = (syy * sxz - sxy * syz) / det;
    let c = (sxx * syz - sxy * sxz) / det;
    let explained = b * sxz + c * syz;
    Ok((explained / szz).clamp(0.0, 1.0))
}

/// Which dataset family to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Stationary realizations over the training ranges.
    Train,
    /// Long-range realizations (range above one-third of the extent).
    Type1,
    /// Trend-contaminated realizations over ranges × proportions.
    Type2,
}

impl DatasetKind {
    /// Canonical lowercase name, used in generated file names.
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Train => "train",
            DatasetKind::Type1 => "type1",
            DatasetKind::Type2 => "type2",
        }
    }

    /// Parses the canonical lowercase name.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetKind::Train),
            "type1" => Ok(DatasetKind::Type1),
            "type2" => Ok(DatasetKind::Type2),
            other => Err(Error::invalid(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Options modifying dataset generation.
#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    /// Variogram family of the simulated residuals.
    pub kind: crate::variogram::VariogramKind,
    /// Fixed trend azimuth in degrees; `None` draws one per realization
    /// (uniform in `[0, 360)`) from the item seed's azimuth stream.
    pub azimuth_deg: Option<f64>,
    /// Overwrite an existing dataset directory.
    pub force: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            kind: crate::variogram::VariogramKind::Spherical,
            azimuth_deg: None,
            force: false,
        }
    }
}

/// One (range, proportion) setting of a generation run.
#[derive(Clone, Copy, Debug)]
struct Setting {
    range_m: f64,
    proportion: f64,
}

/// Simulates one dataset item at the given setting from its item seed.
///
/// This is the per-item step of [`generate_dataset`]: a stationary residual
/// is simulated first, then relabeled (type 1) or mixed with a planar trend
/// (type 2, azimuth drawn from the seed's azimuth stream unless fixed in
/// `opts`). `proportion` is only consulted for [`DatasetKind::Type2`].
pub fn generate_item(
    grid: GridSpec,
    kind: DatasetKind,
    range_m: f64,
    proportion: f64,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<Realization> {
    let model = VariogramModel::standard(opts.kind, range_m)?;
    let config = SimulationConfig::new(grid, model, seed)?;
    let realization = simulate(&config)?;
    match kind {
        DatasetKind::Train => Ok(realization),
        DatasetKind::Type1 => {
            let mut label = realization.label;
            label.nonstat_type = NonstatType::Type1;
            Realization::new(grid, realization.values, label)
        }
        DatasetKind::Type2 => {
            let azimuth_deg = opts
                .azimuth_deg
                .unwrap_or_else(|| stream_rng(seed, Stream::Azimuth).random_range(0.0..360.0));
            let spec = TrendSpec { proportion, azimuth_deg };
            add_linear_trend(&realization, &spec, seed)
        }
    }
}

/// Generates a dataset of realizations plus its manifest.
///
/// Item seeds derive from `(base_seed, setting index, replicate index)`
/// through [`derive_seed`], and the manifest records the seed of every item,
/// so any file can be regenerated in isolation. Items are simulated in
/// parallel; outputs do not depend on the number of threads.
///
/// `proportions` is only consulted for [`DatasetKind::Type2`]. A `count` of
/// zero yields an empty manifest. An existing manifest in `out_dir` is only
/// overwritten when [`GenerateOptions::force`] is set.
pub fn generate_dataset(
    grid: GridSpec,
    kind: DatasetKind,
    ranges: &[f64],
    proportions: &[f64],
    count: usize,
    base_seed: u64,
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<DatasetManifest> {
    grid.validate()?;
    for &r in ranges {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::invalid(format!("range {r} must be positive and finite")));
        }
        if kind == DatasetKind::Type1 && r * 3.0 <= grid.extent() {
            return Err(Error::invalid(format!(
                "type1 range {r} must exceed one-third of the extent {}",
                grid.extent()
            )));
        }
    }
    let settings: Vec<Setting> = match kind {
        DatasetKind::Train | DatasetKind::Type1 => ranges
            .iter()
            .map(|&r| Setting { range_m: r, proportion: 0.0 })
            .collect(),
        DatasetKind::Type2 => {
            for &p in proportions {
                if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                    return Err(Error::invalid(format!("proportion {p} must lie in [0, 1]")));
                }
            }
            let mut out = Vec::new();
            for &r in ranges {
                for &p in proportions {
                    out.push(Setting { range_m: r, proportion: p });
                }
            }
            out
        }
    };
    if count > 0 && settings.is_empty() {
        return Err(Error::invalid(format!(
            "no settings to generate: ranges{} must be non-empty",
            if kind == DatasetKind::Type2 { " and proportions" } else { "" }
        )));
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() && !opts.force {
        return Err(Error::invalid(format!(
            "{} already holds a dataset; pass force to overwrite",
            out_dir.display()
        )));
    }

    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..count).map(move |rep| (s, rep)))
        .collect();
    let items: Vec<ManifestItem> = jobs
        .par_iter()
        .map(|&(s_idx, rep)| -> Result<ManifestItem> {
            let setting = settings[s_idx];
            let seed = derive_seed(base_seed, s_idx as u64, rep as u64);
            let finished =
                generate_item(grid, kind, setting.range_m, setting.proportion, opts, seed)?;
            let file = format!("{kind}_{s_idx:04}_{rep:04}.gsr");
            finished.write_file(&out_dir.join(&file))?;
            Ok(ManifestItem {
                file,
                range_m: finished.label.range_m,
                trend_proportion: finished.label.trend_proportion,
                seed,
                nonstat_type: finished.label.nonstat_type,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest { grid, items };
    manifest.write_file(&manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variogram::VariogramKind;

    fn spherical(range: f64) -> VariogramModel {
        VariogramModel::standard(VariogramKind::Spherical, range).unwrap()
    }

    #[test]
    fn path_is_a_deterministic_permutation() {
        let n = 500;
        let path = random_path(42, n);
        assert_eq!(path, random_path(42, n));
        assert_ne!(path, random_path(43, n));
        let mut seen = vec![false; n];
        for &c in &path {
            assert!(!seen[c], "cell {c} visited twice");
            seen[c] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn path_order_is_uncorrelated_with_index() {
        for seed in [1_u64, 7, 1234] {
            let n = 64 * 64;
            let path = random_path(seed, n);
            let mut position = vec![0.0_f64; n];
            for (pos, &cell) in path.iter().enumerate() {
                position[cell] = pos as f64;
            }
            // Both sequences are permutations of 0..n, so Pearson on them is
            // exactly the Spearman rank correlation.
            let mean = (n as f64 - 1.0) / 2.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &p) in position.iter().enumerate() {
                num += (i as f64 - mean) * (p - mean);
                den += (i as f64 - mean) * (i as f64 - mean);
            }
            let rho = num / den;
            assert!(rho.abs() < 0.05, "seed {seed}: ρ = {rho}");
        }
    }

    #[test]
    fn kriging_with_no_samples_returns_prior() {
        let m = spherical(100.0);
        let (mean, var) = simple_kriging(&[], (10.0, 10.0), &m).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(var, 1.0);
    }

    #[test]
    fn kriging_single_sample_hand_values() {
        // One sample at 50 m from the target under a unit spherical model
        // with range 100: λ = C(50)/C(0) = 0.3125, so the estimate is
        // 0.3125·z and the variance is 1 − 0.3125² = 0.90234375.
        let m = spherical(100.0);
        let (mean, var) = simple_kriging(&[(50.0, 0.0, 2.0)], (0.0, 0.0), &m).unwrap();
        assert_eq!(mean, 0.625);
        assert_eq!(var, 0.90234375);
    }

    #[test]
    fn kriging_reproduces_sample_at_zero_distance() {
        let m = spherical(100.0);
        let (mean, var) = simple_kriging(&[(5.0, 5.0, 1.25)], (5.0, 5.0), &m).unwrap();
        assert_eq!(mean, 1.25);
        assert!(var.abs() < 1e-12);
    }

    #[test]
    fn kriging_rejects_duplicate_samples() {
        let m = spherical(100.0);
        let samples = [(5.0, 5.0, 1.0), (5.0, 5.0, 2.0)];
        match simple_kriging(&samples, (0.0, 0.0), &m) {
            Err(Error::SingularSystem(_)) => {}
            other => panic!("expected SingularSystem, got {other:?}"),
        }
    }

    #[test]
    fn kriging_weights_shrink_with_distance() {
        let m = spherical(100.0);
        let (m_near, v_near) = simple_kriging(&[(10.0, 0.0, 1.0)], (0.0, 0.0), &m).unwrap();
        let (m_far, v_far) = simple_kriging(&[(90.0, 0.0, 1.0)], (0.0, 0.0), &m).unwrap();
        assert!(m_near > m_far);
        assert!(v_near < v_far);
    }

    #[test]
    fn solver_matches_hand_inverse() {
        // [[2, 1], [1, 3]]·x = [5, 10] has x = [1, 3].
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![5.0, 10.0];
        solve_dense(&mut a, &mut b, 2).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solver_needs_pivoting() {
        // Zero leading diagonal entry forces a row swap.
        let mut a = vec![0.0, 1.0, 1.0, 0.0];
        let mut b = vec![2.0, 3.0];
        solve_dense(&mut a, &mut b, 2).unwrap();
        assert_eq!(b, vec![3.0, 2.0]);
    }

    #[test]
    fn simulation_is_bit_reproducible() {
        let grid = GridSpec::new(16, 16, 5.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(40.0), 7).unwrap();
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);

        let other = SimulationConfig { seed: 8, ..cfg };
        let c = simulate(&other).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn simulation_labels_are_stationary() {
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(20.0), 3).unwrap();
        let r = simulate(&cfg).unwrap();
        assert_eq!(r.label.nonstat_type, NonstatType::Stationary);
        assert_eq!(r.label.range_m, 20.0);
        assert_eq!(r.label.seed, 3);
        assert_eq!(r.label.trend_proportion, 0.0);
    }

    #[test]
    fn trend_zero_proportion_is_identity_on_values() {
        let grid = GridSpec::new(12, 12, 5.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(30.0), 11).unwrap();
        let r = simulate(&cfg).unwrap();
        let out = add_linear_trend(&r, &TrendSpec { proportion: 0.0, azimuth_deg: 33.0 }, 11)
            .unwrap();
        let bits_r: Vec<u32> = r.values.iter().map(|v| v.to_bits()).collect();
        let bits_o: Vec<u32> = out.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_r, bits_o);
        assert_eq!(out.label.nonstat_type, NonstatType::Type2);
        assert_eq!(out.label.trend_proportion, 0.0);
    }

    #[test]
    fn trend_full_proportion_is_pure_standardized_ramp() {
        let grid = GridSpec::new(10, 10, 2.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(8.0), 5).unwrap();
        let r = simulate(&cfg).unwrap();
        let out = add_linear_trend(&r, &TrendSpec { proportion: 1.0, azimuth_deg: 0.0 }, 5)
            .unwrap();
        assert!(out.mean().abs() < 1e-6);
        assert!((out.variance() - 1.0).abs() < 1e-5);
        // Azimuth 0 ramps along +x only, so each column is constant in y.
        for ix in 0..10 {
            for iy in 1..10 {
                assert_eq!(out.value_at(ix, iy), out.value_at(ix, 0));
            }
        }
        // And strictly increases with x.
        for ix in 1..10 {
            assert!(out.value_at(ix, 0) > out.value_at(ix - 1, 0));
        }
    }

    #[test]
    fn planar_fit_recovers_exact_planes_and_rejects_constants() {
        let grid = GridSpec::new(6, 5, 2.0).unwrap();
        let planar: Vec<f32> = (0..grid.n_cells())
            .map(|i| {
                let (x, y) = grid.cell_coords(i);
                (0.75 + 0.3 * x - 1.2 * y) as f32
            })
            .collect();
        let label = LabelMeta {
            range_m: 10.0,
            trend_proportion: 0.0,
            seed: 0,
            nonstat_type: NonstatType::Stationary,
        };
        let r = Realization::new(grid, planar, label).unwrap();
        assert!((planar_trend_fraction(&r).unwrap() - 1.0).abs() < 1e-9);

        let flat = Realization::new(grid, vec![3.0; grid.n_cells()], label).unwrap();
        assert!(planar_trend_fraction(&flat).is_err());
    }

    #[test]
    fn planar_fit_tracks_the_injected_proportion() {
        let grid = GridSpec::new(48, 48, 5.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(40.0), 31).unwrap();
        let r = simulate(&cfg).unwrap();
        let p0 = planar_trend_fraction(&r).unwrap();
        assert!(p0 < 0.25, "stationary field fit a plane with R² = {p0}");

        let trended = add_linear_trend(
            &r,
            &TrendSpec { proportion: 0.8, azimuth_deg: 63.0 },
            31,
        )
        .unwrap();
        let p = planar_trend_fraction(&trended).unwrap();
        assert!((p - 0.8).abs() < 0.1, "recovered {p} for injected 0.8");

        let pure = add_linear_trend(
            &r,
            &TrendSpec { proportion: 1.0, azimuth_deg: 63.0 },
            31,
        )
        .unwrap();
        assert!((planar_trend_fraction(&pure).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trend_rejects_bad_inputs() {
        let grid = GridSpec::new(8, 8, 1.0).unwrap();
        let cfg = SimulationConfig::new(grid, spherical(5.0), 2).unwrap();
        let r = simulate(&cfg).unwrap();
        assert!(add_linear_trend(&r, &TrendSpec { proportion: -0.1, azimuth_deg: 0.0 }, 2).is_err());
        assert!(add_linear_trend(&r, &TrendSpec { proportion: 1.1, azimuth_deg: 0.0 }, 2).is_err());
        assert!(add_linear_trend(&r, &TrendSpec { proportion: f64::NAN, azimuth_deg: 0.0 }, 2).is_err());
        let trended =
            add_linear_trend(&r, &TrendSpec { proportion: 0.5, azimuth_deg: 10.0 }, 2).unwrap();
        // Already trended inputs are not valid residuals.
        assert!(add_linear_trend(&trended, &TrendSpec { proportion: 0.5, azimuth_deg: 10.0 }, 2)
            .is_err());
    }

    #[test]
    fn generate_count_zero_yields_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        let manifest = generate_dataset(
            grid,
            DatasetKind::Train,
            &[10.0, 20.0],
            &[],
            0,
            1,
            dir.path(),
            &GenerateOptions::default(),
        )
        .unwrap();
        assert!(manifest.items.is_empty());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn generate_writes_readable_items_with_derived_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        let manifest = generate_dataset(
            grid,
            DatasetKind::Train,
            &[10.0, 20.0],
            &[],
            2,
            99,
            dir.path(),
            &GenerateOptions::default(),
        )
        .unwrap();
        assert_eq!(manifest.items.len(), 4);
        for (idx, item) in manifest.items.iter().enumerate() {
            let (s_idx, rep) = (idx / 2, idx % 2);
            assert_eq!(item.seed, derive_seed(99, s_idx as u64, rep as u64));
            let r = Realization::read_file(&dir.path().join(&item.file)).unwrap();
            assert_eq!(r.label, item.label());
            assert_eq!(r.grid, grid);
        }
        let back = DatasetManifest::read_file(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn generate_respects_force_flag() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        let run = |force: bool| {
            generate_dataset(
                grid,
                DatasetKind::Train,
                &[10.0],
                &[],
                1,
                1,
                dir.path(),
                &GenerateOptions { force, ..GenerateOptions::default() },
            )
        };
        run(false).unwrap();
        assert!(run(false).is_err());
        run(true).unwrap();
    }

    #[test]
    fn generate_type1_validates_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        // Extent 40 m: a 10 m range is not a long-range setting.
        let err = generate_dataset(
            grid,
            DatasetKind::Type1,
            &[10.0],
            &[],
            1,
            1,
            dir.path(),
            &GenerateOptions::default(),
        );
        assert!(err.is_err());
        let ok = generate_dataset(
            grid,
            DatasetKind::Type1,
            &[20.0],
            &[],
            1,
            1,
            dir.path(),
            &GenerateOptions::default(),
        )
        .unwrap();
        assert_eq!(ok.items[0].nonstat_type, NonstatType::Type1);
    }

    #[test]
    fn generate_type2_is_deterministic_across_runs() {
        let grid = GridSpec::new(8, 8, 5.0).unwrap();
        let run = |dir: &Path| {
            generate_dataset(
                grid,
                DatasetKind::Type2,
                &[10.0],
                &[0.0, 0.5],
                2,
                7,
                dir,
                &GenerateOptions::default(),
            )
            .unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = run(d1.path());
        let m2 = run(d2.path());
        assert_eq!(m1.items, m2.items);
        for item in &m1.items {
            let a = std::fs::read(d1.path().join(&item.file)).unwrap();
            let b = std::fs::read(d2.path().join(&item.file)).unwrap();
            assert_eq!(a, b, "{} differs between runs", item.file);
        }
        // Settings enumerate ranges × proportions; replicates nest inside.
        assert_eq!(m1.items[0].trend_proportion, 0.0);
        assert_eq!(m1.items[1].trend_proportion, 0.0);
        assert_eq!(m1.items[2].trend_proportion, 0.5);
        assert_eq!(m1.items[3].trend_proportion, 0.5);
        assert!(m1.items.iter().all(|i| i.nonstat_type == NonstatType::Type2));
    }
}
