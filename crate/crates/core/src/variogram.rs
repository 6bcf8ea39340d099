//! Variogram models, the experimental semivariogram, and range fitting.
//!
//! Models use the practical-range convention: the model reaches 95% of its
//! sill at `range_m` (exactly the sill for the spherical model). The
//! experimental estimator is omnidirectional with Euclidean lag distances and
//! half-bin assignment: a pair at distance `h` belongs to bin
//! `round(h / bin_width)`, bin centers sit at whole multiples of the bin
//! width, and pairs closer than half a bin width are dropped.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Realization;
use crate::rng::{stream_rng, Stream};

/// Parametric variogram families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramKind {
    Spherical,
    Exponential,
    Gaussian,
}

impl VariogramKind {
    /// Canonical lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            VariogramKind::Spherical => "spherical",
            VariogramKind::Exponential => "exponential",
            VariogramKind::Gaussian => "gaussian",
        }
    }

    /// Parses the canonical lowercase name.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spherical" => Ok(VariogramKind::Spherical),
            "exponential" => Ok(VariogramKind::Exponential),
            "gaussian" => Ok(VariogramKind::Gaussian),
            other => Err(Error::invalid(format!("unknown variogram kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for VariogramKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A variogram model with nugget, sill, and practical range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub kind: VariogramKind,
    /// Practical range in meters.
    pub range_m: f64,
    /// Variance contribution of the structured component.
    pub sill: f64,
    /// Discontinuity at the origin.
    pub nugget: f64,
}

impl VariogramModel {
    /// Builds a model, rejecting non-finite or non-positive-definite inputs.
    pub fn new(kind: VariogramKind, range_m: f64, sill: f64, nugget: f64) -> Result<Self> {
        if !(range_m.is_finite() && range_m > 0.0) {
            return Err(Error::invalid(format!(
                "variogram range must be positive and finite, got {range_m}"
            )));
        }
        if !(sill.is_finite() && sill >= 0.0) || !(nugget.is_finite() && nugget >= 0.0) {
            return Err(Error::invalid(format!(
                "sill and nugget must be finite and non-negative, got sill={sill} nugget={nugget}"
            )));
        }
        if sill + nugget <= 0.0 {
            return Err(Error::invalid("sill + nugget must be positive"));
        }
        Ok(VariogramModel { kind, range_m, sill, nugget })
    }

    /// Unit-variance model of the given family: sill 1, nugget 0.
    pub fn standard(kind: VariogramKind, range_m: f64) -> Result<Self> {
        VariogramModel::new(kind, range_m, 1.0, 0.0)
    }

    /// Semivariance at lag distance `h` meters.
    ///
    /// `γ(0) = 0` exactly; for `h > 0` the nugget applies in full.
    ///
    /// * spherical: `nugget + sill·(1.5·h/a − 0.5·(h/a)³)` for `h < a`, the
    ///   full sill beyond;
    /// * exponential: `nugget + sill·(1 − exp(−3h/a))`;
    /// * gaussian: `nugget + sill·(1 − exp(−3h²/a²))`.
    pub fn semivariance(&self, h: f64) -> Result<f64> {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::invalid(format!(
                "lag distance must be non-negative and finite, got {h}"
            )));
        }
        if h == 0.0 {
            return Ok(0.0);
        }
        let r = h / self.range_m;
        let structured = match self.kind {
            VariogramKind::Spherical => {
                if r < 1.0 {
                    1.5 * r - 0.5 * r * r * r
                } else {
                    1.0
                }
            }
            VariogramKind::Exponential => 1.0 - (-3.0 * r).exp(),
            VariogramKind::Gaussian => 1.0 - (-3.0 * r * r).exp(),
        };
        Ok(self.nugget + self.sill * structured)
    }

    /// Covariance at lag `h`: `(nugget + sill) − γ(h)`.
    pub fn covariance(&self, h: f64) -> Result<f64> {
        Ok(self.nugget + self.sill - self.semivariance(h)?)
    }

    /// Total variance `C(0) = nugget + sill`.
    pub fn total_sill(&self) -> f64 {
        self.nugget + self.sill
    }
}

/// Default number of lag bins for the experimental estimator.
pub const DEFAULT_N_BINS: usize = 30;

/// Pair-count budget above which the estimator switches to subsampling.
pub const PAIR_BUDGET: u64 = 20_000_000;

/// Fixed base seed for pair subsampling, so repeat runs bin identical pairs.
const PAIR_SAMPLE_SEED: u64 = 0x7061_6972;

/// Default maximum lag for a grid: half the domain extent.
pub fn default_max_lag(grid: &crate::grid::GridSpec) -> f64 {
    grid.extent() / 2.0
}

/// Binned experimental semivariogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentalVariogram {
    /// Bin centers in meters: `(k+1)·bin_width` for bin `k`.
    pub lags: Vec<f64>,
    /// Per-bin semivariance; `None` where no pair fell.
    pub gamma: Vec<Option<f64>>,
    /// Pairs accumulated per bin.
    pub pair_counts: Vec<u64>,
    /// Width of each lag bin in meters.
    pub bin_width: f64,
    /// Whether pair subsampling was applied.
    pub subsampled: bool,
}

impl ExperimentalVariogram {
    /// Number of bins holding at least one pair.
    pub fn n_nonempty(&self) -> usize {
        self.gamma.iter().filter(|g| g.is_some()).count()
    }

    /// Renders the variogram as `lag,gamma,pairs` CSV text.
    ///
    /// Empty bins keep their row with a blank gamma field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag,gamma,pairs\n");
        for k in 0..self.lags.len() {
            match self.gamma[k] {
                Some(g) => out.push_str(&format!("{},{},{}\n", self.lags[k], g, self.pair_counts[k])),
                None => out.push_str(&format!("{},,0\n", self.lags[k])),
            }
        }
        out
    }

    /// Writes [`Self::to_csv`] to a file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Experimental semivariogram of a gridded realization.
///
/// Distances are Euclidean between cell centers. When the grid holds more
/// than [`PAIR_BUDGET`] pairs, that many pairs are sampled uniformly with a
/// fixed seed instead of enumerating all of them; below the budget every
/// unordered pair is visited once in row-major index order, so repeat runs
/// are bit-identical.
pub fn experimental_semivariogram(
    r: &Realization,
    n_bins: usize,
    max_lag: f64,
) -> Result<ExperimentalVariogram> {
    let n = r.values.len();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = r.grid.cell_coords(i);
        xs.push(x);
        ys.push(y);
    }
    experimental_semivariogram_points(&xs, &ys, &r.values, n_bins, max_lag)
}

/// Experimental semivariogram of scattered points.
///
/// Same conventions as [`experimental_semivariogram`]; exposed separately so
/// irregular samples can be binned too.
pub fn experimental_semivariogram_points(
    xs: &[f64],
    ys: &[f64],
    values: &[f32],
    n_bins: usize,
    max_lag: f64,
) -> Result<ExperimentalVariogram> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "semivariogram needs at least 2 samples, got {n}"
        )));
    }
    if xs.len() != n || ys.len() != n {
        return Err(Error::invalid(format!(
            "coordinate counts ({}, {}) do not match {} values",
            xs.len(),
            ys.len(),
            n
        )));
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    if !(max_lag.is_finite() && max_lag > 0.0) {
        return Err(Error::invalid(format!(
            "max_lag must be positive and finite, got {max_lag}"
        )));
    }
    let w = max_lag / n_bins as f64;
    let mut sums = vec![0.0_f64; n_bins];
    let mut counts = vec![0_u64; n_bins];

    let visit = |i: usize, j: usize, sums: &mut [f64], counts: &mut [u64]| {
        let dx = xs[i] - xs[j];
        let dy = ys[i] - ys[j];
        let h = (dx * dx + dy * dy).sqrt();
        let k = (h / w).round() as i64;
        if k >= 1 && k <= n_bins as i64 {
            let d = values[i] as f64 - values[j] as f64;
            sums[(k - 1) as usize] += d * d;
            counts[(k - 1) as usize] += 1;
        }
    };

    let total_pairs = (n as u64) * (n as u64 - 1) / 2;
    let subsampled = total_pairs > PAIR_BUDGET;
    if subsampled {
        let mut rng = stream_rng(PAIR_SAMPLE_SEED, Stream::PairSample);
        for _ in 0..PAIR_BUDGET {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            visit(i, j, &mut sums, &mut counts);
        }
    } else {
        for i in 0..n {
            for j in (i + 1)..n {
                visit(i, j, &mut sums, &mut counts);
            }
        }
    }

    let lags: Vec<f64> = (0..n_bins).map(|k| (k as f64 + 1.0) * w).collect();
    let gamma: Vec<Option<f64>> = (0..n_bins)
        .map(|k| {
            if counts[k] > 0 {
                Some(sums[k] / (2.0 * counts[k] as f64))
            } else {
                None
            }
        })
        .collect();
    Ok(ExperimentalVariogram {
        lags,
        gamma,
        pair_counts: counts,
        bin_width: w,
        subsampled,
    })
}

/// Fits the range of a fixed-sill, zero-nugget model to an experimental
/// semivariogram by golden-section search on the pair-count-weighted squared
/// misfit.
///
/// The search covers half the first bin center up to four times the last bin
/// center (with default estimator settings that is twice the domain extent)
/// and stops at 1e-3 relative width.
pub fn fit_range(ev: &ExperimentalVariogram, kind: VariogramKind, sill: f64) -> Result<f64> {
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for k in 0..ev.lags.len() {
        if let Some(g) = ev.gamma[k] {
            pts.push((ev.lags[k], g, ev.pair_counts[k] as f64));
        }
    }
    if pts.len() < 3 {
        return Err(Error::invalid(format!(
            "range fit needs at least 3 non-empty bins, got {}",
            pts.len()
        )));
    }
    if pts.iter().all(|&(_, g, _)| g == 0.0) {
        return Err(Error::invalid(
            "experimental semivariogram is identically zero; no spatial structure to fit",
        ));
    }
    if !(sill.is_finite() && sill > 0.0) {
        return Err(Error::invalid(format!("fit sill must be positive, got {sill}")));
    }

    let misfit = |a: f64| -> f64 {
        let model = VariogramModel {
            kind,
            range_m: a,
            sill,
            nugget: 0.0,
        };
        pts.iter()
            .map(|&(lag, g, cnt)| {
                let m = model.semivariance(lag).expect("lag is finite and positive");
                cnt * (m - g) * (m - g)
            })
            .sum()
    };

    let lo = pts[0].0 * 0.5;
    let hi = pts[pts.len() - 1].0 * 4.0;

    // Coarse geometric scan to bracket the global minimum, then golden
    // section inside the bracket.
    const SCAN: usize = 128;
    let ratio = (hi / lo).powf(1.0 / (SCAN as f64 - 1.0));
    let scan: Vec<f64> = (0..SCAN).map(|i| lo * ratio.powi(i as i32)).collect();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, &a) in scan.iter().enumerate() {
        let v = misfit(a);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let mut a = scan[best.saturating_sub(1)];
    let mut b = scan[(best + 1).min(SCAN - 1)];

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = misfit(c);
    let mut fd = misfit(d);
    while (b - a) > 1e-3 * 0.5 * (a + b) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = misfit(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = misfit(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// Fits a range to a realization with default estimator settings
/// ([`DEFAULT_N_BINS`] bins up to half the domain extent).
///
/// With `sill = None` the fit targets the realization's own sample
/// variance. A single realization's experimental variogram plateaus at its
/// sample variance rather than the generating model's sill, and fitting
/// against a mismatched level biases the range badly once the range is an
/// appreciable fraction of the domain; the sample-variance sill keeps the
/// fit anchored to the curve's shape.
pub fn fitted_range_of(r: &Realization, kind: VariogramKind, sill: Option<f64>) -> Result<f64> {
    let ev = experimental_semivariogram(r, DEFAULT_N_BINS, default_max_lag(&r.grid))?;
    fit_range(&ev, kind, sill.unwrap_or_else(|| r.variance()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, LabelMeta, NonstatType};

    fn model(kind: VariogramKind, a: f64) -> VariogramModel {
        VariogramModel::standard(kind, a).unwrap()
    }

    #[test]
    fn spherical_hand_values() {
        let m = model(VariogramKind::Spherical, 100.0);
        // 1.5·0.5 − 0.5·0.5³ = 0.6875 exactly in binary arithmetic.
        assert_eq!(m.semivariance(50.0).unwrap(), 0.6875);
        assert_eq!(m.covariance(50.0).unwrap(), 0.3125);
        assert_eq!(m.semivariance(0.0).unwrap(), 0.0);
        assert_eq!(m.semivariance(100.0).unwrap(), 1.0);
        assert_eq!(m.semivariance(1e6).unwrap(), 1.0);
    }

    #[test]
    fn practical_range_convention() {
        for kind in [VariogramKind::Exponential, VariogramKind::Gaussian] {
            let m = model(kind, 77.0);
            let g = m.semivariance(77.0).unwrap();
            assert!((g - 0.950212931632136).abs() < 1e-12, "{kind}: {g}");
        }
    }

    #[test]
    fn nugget_applies_off_origin_only() {
        let m = VariogramModel::new(VariogramKind::Spherical, 10.0, 0.75, 0.25).unwrap();
        assert_eq!(m.semivariance(0.0).unwrap(), 0.0);
        assert_eq!(m.semivariance(10.0).unwrap(), 1.0);
        assert_eq!(m.covariance(0.0).unwrap(), 1.0);
        assert!(m.semivariance(1e-9).unwrap() > 0.25);
    }

    #[test]
    fn semivariance_is_monotone_for_all_kinds() {
        for kind in [
            VariogramKind::Spherical,
            VariogramKind::Exponential,
            VariogramKind::Gaussian,
        ] {
            let m = model(kind, 123.0);
            let mut prev = -1.0;
            for i in 0..=2000 {
                let h = i as f64 * 0.25;
                let g = m.semivariance(h).unwrap();
                assert!(g >= prev - 1e-15, "{kind} not monotone at h={h}");
                prev = g;
            }
        }
    }

    #[test]
    fn model_rejects_bad_parameters() {
        assert!(VariogramModel::new(VariogramKind::Spherical, 0.0, 1.0, 0.0).is_err());
        assert!(VariogramModel::new(VariogramKind::Spherical, -3.0, 1.0, 0.0).is_err());
        assert!(VariogramModel::new(VariogramKind::Spherical, 1.0, -0.1, 0.0).is_err());
        assert!(VariogramModel::new(VariogramKind::Spherical, 1.0, 0.0, 0.0).is_err());
        assert!(VariogramModel::new(VariogramKind::Spherical, f64::NAN, 1.0, 0.0).is_err());
        let m = model(VariogramKind::Spherical, 1.0);
        assert!(m.semivariance(-1.0).is_err());
        assert!(m.semivariance(f64::INFINITY).is_err());
    }

    fn line_realization(values: Vec<f32>) -> (Vec<f64>, Vec<f64>, Vec<f32>) {
        let n = values.len();
        let xs: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        let ys = vec![0.5_f64; n];
        (xs, ys, values)
    }

    #[test]
    fn three_point_line_hand_values() {
        // Values 0, 1, 2 on a 1-D line with 1 m spacing: the two lag-1 pairs
        // give γ̂ = (1 + 1) / (2·2) = 0.5 and the single lag-2 pair gives
        // γ̂ = 4 / 2 = 2.
        let (xs, ys, values) = line_realization(vec![0.0, 1.0, 2.0]);
        let ev = experimental_semivariogram_points(&xs, &ys, &values, 2, 2.0).unwrap();
        assert_eq!(ev.lags, vec![1.0, 2.0]);
        assert_eq!(ev.gamma[0], Some(0.5));
        assert_eq!(ev.gamma[1], Some(2.0));
        assert_eq!(ev.pair_counts, vec![2, 1]);
        assert!(!ev.subsampled);
    }

    #[test]
    fn short_pairs_are_dropped() {
        // With a 4 m bin width the 1 m pairs fall below w/2 and vanish,
        // while the single 2 m pair sits exactly on the half-bin edge and
        // rounds up into bin 1.
        let (xs, ys, values) = line_realization(vec![0.0, 1.0, 2.0]);
        let ev = experimental_semivariogram_points(&xs, &ys, &values, 1, 4.0).unwrap();
        assert_eq!(ev.gamma[0], Some(2.0));
        assert_eq!(ev.pair_counts, vec![1]);

        // With a 6 m bin width every pair falls below w/2.
        let ev = experimental_semivariogram_points(&xs, &ys, &values, 1, 6.0).unwrap();
        assert_eq!(ev.gamma[0], None);
        assert_eq!(ev.pair_counts, vec![0]);
        assert_eq!(ev.n_nonempty(), 0);
    }

    #[test]
    fn estimator_validates_inputs() {
        let (xs, ys, values) = line_realization(vec![0.0, 1.0]);
        assert!(experimental_semivariogram_points(&xs, &ys, &values[..1], 2, 2.0).is_err());
        assert!(experimental_semivariogram_points(&xs, &ys, &values, 0, 2.0).is_err());
        assert!(experimental_semivariogram_points(&xs, &ys, &values, 2, 0.0).is_err());
        assert!(experimental_semivariogram_points(&xs, &ys, &values, 2, f64::NAN).is_err());
    }

    #[test]
    fn csv_lists_every_bin() {
        let (xs, ys, values) = line_realization(vec![0.0, 1.0, 2.0]);
        let ev = experimental_semivariogram_points(&xs, &ys, &values, 3, 3.0).unwrap();
        let csv = ev.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lag,gamma,pairs");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "1,0.5,2");
        assert_eq!(lines[2], "2,2,1");
        assert_eq!(lines[3], "3,,0");
    }

    #[test]
    fn fit_recovers_noise_free_range() {
        for kind in [
            VariogramKind::Spherical,
            VariogramKind::Exponential,
            VariogramKind::Gaussian,
        ] {
            let truth = 83.0;
            let m = model(kind, truth);
            let lags: Vec<f64> = (1..=30).map(|k| k as f64 * 10.0).collect();
            let ev = ExperimentalVariogram {
                gamma: lags
                    .iter()
                    .map(|&h| Some(m.semivariance(h).unwrap()))
                    .collect(),
                pair_counts: vec![100; lags.len()],
                lags,
                bin_width: 10.0,
                subsampled: false,
            };
            let fitted = fit_range(&ev, kind, 1.0).unwrap();
            assert!(
                (fitted - truth).abs() / truth < 1e-3,
                "{kind}: fitted {fitted} vs {truth}"
            );
        }
    }

    #[test]
    fn fit_requires_structure() {
        let lags = vec![1.0, 2.0, 3.0];
        let flat = ExperimentalVariogram {
            lags: lags.clone(),
            gamma: vec![Some(0.0); 3],
            pair_counts: vec![5; 3],
            bin_width: 1.0,
            subsampled: false,
        };
        assert!(fit_range(&flat, VariogramKind::Spherical, 1.0).is_err());

        let sparse = ExperimentalVariogram {
            lags,
            gamma: vec![Some(0.5), None, None],
            pair_counts: vec![5, 0, 0],
            bin_width: 1.0,
            subsampled: false,
        };
        assert!(fit_range(&sparse, VariogramKind::Spherical, 1.0).is_err());
    }

    #[test]
    fn iid_noise_has_unit_semivariance() {
        use rand::Rng;
        let grid = GridSpec::new(64, 64, 5.0).unwrap();
        let mut rng = crate::rng::stream_rng(7, crate::rng::Stream::Draw);
        let values: Vec<f32> = (0..grid.n_cells())
            .map(|_| {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                u as f32
            })
            .collect();
        let r = Realization::new(
            grid,
            values,
            LabelMeta {
                range_m: 5.0,
                trend_proportion: 0.0,
                seed: 7,
                nonstat_type: NonstatType::Stationary,
            },
        )
        .unwrap();
        let ev = experimental_semivariogram(&r, DEFAULT_N_BINS, default_max_lag(&grid)).unwrap();
        for k in 0..ev.lags.len() {
            if let Some(g) = ev.gamma[k] {
                assert!((g - 1.0).abs() < 0.1, "bin {k}: γ̂ = {g}");
            }
        }
    }
}
