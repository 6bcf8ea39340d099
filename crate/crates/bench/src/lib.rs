//! Shared fixtures for the criterion benchmarks.

use variobench_core::grid::GridSpec;
use variobench_core::sgs::{generate_item, DatasetKind, GenerateOptions};
use variobench_core::Realization;

/// A 64x64 stationary realization at 5 m cells, deterministic in `seed`.
pub fn desk_realization(range_m: f64, seed: u64) -> Realization {
    let grid = GridSpec::new(64, 64, 5.0).unwrap();
    generate_item(grid, DatasetKind::Train, range_m, 0.0, &GenerateOptions::default(), seed)
        .unwrap()
}
