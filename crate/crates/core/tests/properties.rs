use proptest::prelude::*;

use variobench_core::grid::{GridSpec, LabelMeta, NonstatType, Realization};
use variobench_core::training::Dihedral;
use variobench_core::variogram::{experimental_semivariogram, VariogramModel};
use variobench_core::VariogramKind;

fn stationary_label(range_m: f64, seed: u64) -> LabelMeta {
    LabelMeta {
        range_m,
        trend_proportion: 0.0,
        seed,
        nonstat_type: NonstatType::Stationary,
    }
}

/// All-pairs reference estimator, written independently of the library:
/// coordinates from scratch, the same rounding bin rule, the same pair
/// visiting order so sums agree bit for bit.
fn brute_force(
    nx: usize,
    ny: usize,
    cell: f64,
    values: &[f32],
    n_bins: usize,
    max_lag: f64,
) -> (Vec<f64>, Vec<Option<f64>>, Vec<u64>) {
    let w = max_lag / n_bins as f64;
    let mut sums = vec![0.0_f64; n_bins];
    let mut counts = vec![0_u64; n_bins];
    let n = nx * ny;
    for i in 0..n {
        for j in (i + 1)..n {
            let (xi, yi) = ((i % nx) as f64 + 0.5, (i / nx) as f64 + 0.5);
            let (xj, yj) = ((j % nx) as f64 + 0.5, (j / nx) as f64 + 0.5);
            let dx = (xi - xj) * cell;
            let dy = (yi - yj) * cell;
            let h = (dx * dx + dy * dy).sqrt();
            let k = (h / w).round() as i64;
            if k >= 1 && k <= n_bins as i64 {
                let d = values[i] as f64 - values[j] as f64;
                sums[(k - 1) as usize] += d * d;
                counts[(k - 1) as usize] += 1;
            }
        }
    }
    let lags = (0..n_bins).map(|k| (k as f64 + 1.0) * w).collect();
    let gamma = (0..n_bins)
        .map(|k| (counts[k] > 0).then(|| sums[k] / (2.0 * counts[k] as f64)))
        .collect();
    (lags, gamma, counts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimator_matches_brute_force_enumeration(
        nx in 2_usize..=16,
        ny in 2_usize..=16,
        cell in 0.5_f64..10.0,
        n_bins in 1_usize..=40,
        lag_frac in 0.2_f64..1.0,
        seed in any::<u64>(),
    ) {
        let grid = GridSpec::new(nx, ny, cell).unwrap();
        let values: Vec<f32> = (0..nx * ny)
            .map(|i| {
                let h = variobench_core::rng::splitmix64(seed ^ i as u64);
                ((h as f64 / u64::MAX as f64) * 6.0 - 3.0) as f32
            })
            .collect();
        let r = Realization::new(grid, values.clone(), stationary_label(cell, seed)).unwrap();
        let max_lag = grid.extent() * lag_frac;

        let ev = experimental_semivariogram(&r, n_bins, max_lag).unwrap();
        let (lags, gamma, counts) = brute_force(nx, ny, cell, &values, n_bins, max_lag);

        prop_assert!(!ev.subsampled);
        prop_assert_eq!(&ev.lags, &lags);
        prop_assert_eq!(&ev.pair_counts, &counts);
        prop_assert_eq!(ev.gamma.len(), gamma.len());
        for k in 0..n_bins {
            match (ev.gamma[k], gamma[k]) {
                (Some(a), Some(b)) => prop_assert_eq!(a.to_bits(), b.to_bits(),
                    "bin {} differs: {} vs {}", k, a, b),
                (None, None) => {}
                (a, b) => prop_assert!(false, "bin {} presence differs: {:?} vs {:?}", k, a, b),
            }
        }
    }

    #[test]
    fn estimator_is_invariant_under_dihedral_transforms(
        side in 2_usize..=12,
        cell in 0.5_f64..5.0,
        seed in any::<u64>(),
    ) {
        let grid = GridSpec::new(side, side, cell).unwrap();
        let values: Vec<f32> = (0..side * side)
            .map(|i| {
                let h = variobench_core::rng::splitmix64(seed.wrapping_add(i as u64));
                ((h as f64 / u64::MAX as f64) * 2.0 - 1.0) as f32
            })
            .collect();
        let r = Realization::new(grid, values, stationary_label(cell, seed)).unwrap();
        let base = experimental_semivariogram(&r, 12, grid.extent() / 2.0).unwrap();

        for t in Dihedral::ALL {
            let moved = t.apply_realization(&r).unwrap();
            let ev = experimental_semivariogram(&moved, 12, grid.extent() / 2.0).unwrap();
            prop_assert_eq!(&ev.pair_counts, &base.pair_counts);
            for k in 0..base.gamma.len() {
                match (base.gamma[k], ev.gamma[k]) {
                    (Some(a), Some(b)) => {
                        let tol = 1e-10 * a.abs().max(1.0);
                        prop_assert!((a - b).abs() <= tol,
                            "{:?} bin {}: {} vs {}", t, k, a, b);
                    }
                    (None, None) => {}
                    (a, b) => prop_assert!(false,
                        "{:?} bin {} presence differs: {:?} vs {:?}", t, k, a, b),
                }
            }
        }
    }

    #[test]
    fn model_curves_are_monotone_and_complementary(
        kind_ix in 0_usize..3,
        range in 1.0_f64..500.0,
        h1 in 0.0_f64..600.0,
        h2 in 0.0_f64..600.0,
    ) {
        let kind = [VariogramKind::Spherical, VariogramKind::Exponential, VariogramKind::Gaussian][kind_ix];
        let m = VariogramModel::standard(kind, range).unwrap();
        let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
        let g_lo = m.semivariance(lo).unwrap();
        let g_hi = m.semivariance(hi).unwrap();
        prop_assert!(g_lo <= g_hi + 1e-12, "γ({lo}) = {g_lo} > γ({hi}) = {g_hi}");
        let c_lo = m.covariance(lo).unwrap();
        let c_hi = m.covariance(hi).unwrap();
        prop_assert!(c_lo >= c_hi - 1e-12);
        let total = m.nugget + m.sill;
        prop_assert!((g_lo + c_lo - total).abs() < 1e-12);
        prop_assert_eq!(m.semivariance(0.0).unwrap(), 0.0);
    }

    #[test]
    fn realization_files_round_trip_bit_exactly(
        nx in 2_usize..=20,
        ny in 2_usize..=20,
        cell in 0.1_f64..25.0,
        range in 0.5_f64..2000.0,
        prop_milli in 0_u32..=1000,
        seed in any::<u64>(),
        trended in any::<bool>(),
    ) {
        let grid = GridSpec::new(nx, ny, cell).unwrap();
        let values: Vec<f32> = (0..nx * ny)
            .map(|i| {
                let h = variobench_core::rng::splitmix64(seed ^ (0xabcd + i as u64));
                f32::from_bits((h as u32 & 0x3fff_ffff) | 0x3000_0000)
            })
            .collect();
        let label = LabelMeta {
            range_m: range,
            trend_proportion: if trended { prop_milli as f64 / 1000.0 } else { 0.0 },
            seed,
            nonstat_type: if trended { NonstatType::Type2 } else { NonstatType::Stationary },
        };
        let r = Realization::new(grid, values, label).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.gsr");
        r.write_file(&path).unwrap();
        let back = Realization::read_file(&path).unwrap();
        prop_assert_eq!(back.grid, r.grid);
        prop_assert_eq!(back.label, r.label);
        prop_assert_eq!(
            back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
