//! Regular-grid types, realization labels, and on-disk formats.
//!
//! A realization is a single-variable field sampled on a regular 2-D grid.
//! Values live in standard-Gaussian units; any physical rescaling is left to
//! downstream consumers. Files carry a fixed-size text header followed by the
//! raw little-endian `f32` payload in row-major order, so a write/read cycle
//! is bit-exact.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a regular 2-D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of columns.
    pub nx: usize,
    /// Number of rows.
    pub ny: usize,
    /// Cell side length in meters.
    pub cell_size: f64,
}

impl GridSpec {
    /// Builds a grid spec, rejecting degenerate geometry.
    pub fn new(nx: usize, ny: usize, cell_size: f64) -> Result<Self> {
        let spec = GridSpec { nx, ny, cell_size };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the grid invariants (useful after deserialization).
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::invalid(format!(
                "grid must be at least 2x2, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::invalid(format!(
                "cell_size must be positive and finite, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    /// Total number of cells.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Domain extent in meters along the longer side.
    pub fn extent(&self) -> f64 {
        (self.nx.max(self.ny) as f64) * self.cell_size
    }

    /// Center coordinates in meters of the cell with row-major linear index `i`.
    pub fn cell_coords(&self, i: usize) -> (f64, f64) {
        let ix = i % self.nx;
        let iy = i / self.nx;
        (
            (ix as f64 + 0.5) * self.cell_size,
            (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Row-major linear index of cell `(ix, iy)`.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }
}

/// Stationarity class of a realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonstatType {
    /// In-distribution: range well below the domain extent, no trend.
    Stationary,
    /// Range exceeding one-third of the domain extent.
    Type1,
    /// Additive planar trend mixed into a stationary residual.
    Type2,
}

impl NonstatType {
    /// Canonical lowercase name used in headers and manifests.
    pub fn as_str(&self) -> &'static str {
        match self {
            NonstatType::Stationary => "stationary",
            NonstatType::Type1 => "type1",
            NonstatType::Type2 => "type2",
        }
    }

    /// Parses the canonical lowercase name.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(NonstatType::Stationary),
            "type1" => Ok(NonstatType::Type1),
            "type2" => Ok(NonstatType::Type2),
            other => Err(Error::invalid(format!("unknown nonstationarity kind {other:?}"))),
        }
    }
}

impl fmt::Display for NonstatType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth metadata attached to a realization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMeta {
    /// True variogram range of the (residual) field, meters.
    pub range_m: f64,
    /// Variance fraction contributed by the planar trend, in `[0, 1]`.
    pub trend_proportion: f64,
    /// Seed the realization was generated from.
    pub seed: u64,
    /// Stationarity class.
    pub nonstat_type: NonstatType,
}

impl LabelMeta {
    /// Checks label invariants that do not depend on the grid.
    pub fn validate(&self) -> Result<()> {
        if !(self.range_m.is_finite() && self.range_m > 0.0) {
            return Err(Error::invalid(format!(
                "label range_m must be positive and finite, got {}",
                self.range_m
            )));
        }
        if !(0.0..=1.0).contains(&self.trend_proportion) || !self.trend_proportion.is_finite() {
            return Err(Error::invalid(format!(
                "trend_proportion must lie in [0, 1], got {}",
                self.trend_proportion
            )));
        }
        if self.nonstat_type == NonstatType::Stationary && self.trend_proportion != 0.0 {
            return Err(Error::invalid(
                "stationary labels must carry trend_proportion = 0",
            ));
        }
        Ok(())
    }
}

/// A simulated field on a regular grid together with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub grid: GridSpec,
    /// Row-major cell values in standard-Gaussian units.
    pub values: Vec<f32>,
    pub label: LabelMeta,
}

impl Realization {
    /// Assembles a realization, enforcing every structural invariant.
    pub fn new(grid: GridSpec, values: Vec<f32>, label: LabelMeta) -> Result<Self> {
        grid.validate()?;
        label.validate()?;
        if values.len() != grid.n_cells() {
            return Err(Error::invalid(format!(
                "value count {} does not match grid {}x{}",
                values.len(),
                grid.nx,
                grid.ny
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at cell {bad}"
            )));
        }
        if label.nonstat_type == NonstatType::Type1 && label.range_m * 3.0 <= grid.extent() {
            return Err(Error::invalid(format!(
                "type1 labels require range > extent/3 ({} <= {})",
                label.range_m,
                grid.extent() / 3.0
            )));
        }
        Ok(Realization { grid, values, label })
    }

    /// Value of cell `(ix, iy)`.
    pub fn value_at(&self, ix: usize, iy: usize) -> f32 {
        self.values[self.grid.index(ix, iy)]
    }

    /// Sample mean of all cell values, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Population variance of all cell values, accumulated in `f64`.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.values.len() as f64
    }

    /// Writes the realization to `path` in the fixed-header binary format.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let header = format_header(&self.grid, &self.label)?;
        let mut bytes = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        bytes.extend_from_slice(&header);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(&p, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    /// Reads a realization back from `path`, validating every invariant.
    pub fn read_file(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut file = fs::File::open(path).map_err(|e| Error::io(&p, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(&p, e))?;
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: p,
                reason: format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()),
            });
        }
        let (grid, label) = parse_header(&bytes[..HEADER_LEN], &p)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() % 4 != 0 {
            return Err(Error::Truncated {
                path: p,
                reason: format!("payload of {} bytes is not a whole number of f32 values", payload.len()),
            });
        }
        let actual = payload.len() / 4;
        if actual != grid.n_cells() {
            return Err(Error::DimensionMismatch {
                path: p,
                expected: grid.n_cells(),
                actual,
            });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Realization::new(grid, values, label)
    }
}

/// Fixed total size in bytes of the realization file header.
pub const HEADER_LEN: usize = 192;
const MAGIC: &str = "GSREAL";
const VERSION: u32 = 1;

fn format_header(grid: &GridSpec, label: &LabelMeta) -> Result<[u8; HEADER_LEN]> {
    let text = format!(
        "{MAGIC} v{VERSION} nx={} ny={} cell={} range={} trend={} seed={} kind={}",
        grid.nx,
        grid.ny,
        grid.cell_size,
        label.range_m,
        label.trend_proportion,
        label.seed,
        label.nonstat_type
    );
    let bytes = text.as_bytes();
    if bytes.len() >= HEADER_LEN {
        return Err(Error::invalid(format!(
            "header text of {} bytes exceeds the fixed {HEADER_LEN}-byte slot",
            bytes.len()
        )));
    }
    let mut out = [b' '; HEADER_LEN];
    out[..bytes.len()].copy_from_slice(bytes);
    out[HEADER_LEN - 1] = b'\n';
    Ok(out)
}

fn parse_header(raw: &[u8], path: &str) -> Result<(GridSpec, LabelMeta)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_string(),
        reason,
    };
    let text = std::str::from_utf8(raw).map_err(|_| malformed("header is not UTF-8".into()))?;
    let mut tokens = text.split_whitespace();
    match tokens.next() {
        Some(m) if m == MAGIC => {}
        other => return Err(malformed(format!("bad magic {other:?}"))),
    }
    match tokens.next() {
        Some(v) if v == format!("v{VERSION}") => {}
        other => return Err(malformed(format!("unsupported version {other:?}"))),
    }
    let mut nx = None;
    let mut ny = None;
    let mut cell = None;
    let mut range = None;
    let mut trend = None;
    let mut seed = None;
    let mut kind = None;
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, got {token:?}")))?;
        match key {
            "nx" => nx = Some(value.parse::<usize>().map_err(|e| malformed(format!("nx: {e}")))?),
            "ny" => ny = Some(value.parse::<usize>().map_err(|e| malformed(format!("ny: {e}")))?),
            "cell" => cell = Some(value.parse::<f64>().map_err(|e| malformed(format!("cell: {e}")))?),
            "range" => range = Some(value.parse::<f64>().map_err(|e| malformed(format!("range: {e}")))?),
            "trend" => trend = Some(value.parse::<f64>().map_err(|e| malformed(format!("trend: {e}")))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| malformed(format!("seed: {e}")))?),
            "kind" => kind = Some(NonstatType::parse(value).map_err(|e| malformed(e.to_string()))?),
            other => return Err(malformed(format!("unknown header field {other:?}"))),
        }
    }
    let grid = GridSpec {
        nx: nx.ok_or_else(|| malformed("missing nx".into()))?,
        ny: ny.ok_or_else(|| malformed("missing ny".into()))?,
        cell_size: cell.ok_or_else(|| malformed("missing cell".into()))?,
    };
    let label = LabelMeta {
        range_m: range.ok_or_else(|| malformed("missing range".into()))?,
        trend_proportion: trend.ok_or_else(|| malformed("missing trend".into()))?,
        seed: seed.ok_or_else(|| malformed("missing seed".into()))?,
        nonstat_type: kind.ok_or_else(|| malformed("missing kind".into()))?,
    };
    Ok((grid, label))
}

/// One dataset entry: a realization file and its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// File name, relative to the manifest's directory.
    pub file: String,
    pub range_m: f64,
    pub trend_proportion: f64,
    pub seed: u64,
    pub nonstat_type: NonstatType,
}

impl ManifestItem {
    /// Label carried by this entry.
    pub fn label(&self) -> LabelMeta {
        LabelMeta {
            range_m: self.range_m,
            trend_proportion: self.trend_proportion,
            seed: self.seed,
            nonstat_type: self.nonstat_type,
        }
    }
}

/// Index of a generated dataset: shared grid plus per-item labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Serializes the manifest as pretty JSON.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&p, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(&p, e))
    }

    /// Loads and validates a manifest.
    pub fn read_file(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        manifest.grid.validate()?;
        for item in &manifest.items {
            item.label().validate()?;
        }
        Ok(manifest)
    }
}
