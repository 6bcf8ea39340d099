//! Geostatistical benchmark toolkit: sequential Gaussian simulation,
//! variogram analysis, a reverse-mode tensor engine, and neural regressors
//! that predict variogram range from gridded realizations.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod grid;
pub mod rng;
pub mod sgs;
pub mod tensor;
pub mod training;
pub mod variogram;

pub use error::{Error, Result};
pub use grid::{DatasetManifest, GridSpec, LabelMeta, ManifestItem, NonstatType, Realization};
pub use sgs::{DatasetKind, GenerateOptions, SimulationConfig, TrendSpec};
pub use variogram::{ExperimentalVariogram, VariogramKind, VariogramModel};
