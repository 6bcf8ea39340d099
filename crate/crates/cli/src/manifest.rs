//! Run capture: resolved configuration plus input/output digests, written
//! next to every artifact the tool produces so any run can be replayed and
//! verified byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use variobench_core::models::ModelFamily;
use variobench_core::training::TrainConfig;
use variobench_core::{DatasetKind, Error, Result, VariogramKind};

/// File name of the run record inside each artifact directory.
pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Version of the manifest layout itself.
pub const FORMAT_VERSION: u32 = 1;

/// Resolved settings of one subcommand run.
///
/// Everything needed to replay the run is here except the output directory
/// and execution details that must not affect results (worker-thread count,
/// realization cache).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum CommandConfig {
    Generate {
        kind: DatasetKind,
        nx: usize,
        ny: usize,
        cell_size_m: f64,
        variogram: VariogramKind,
        ranges_m: Vec<f64>,
        proportions: Vec<f64>,
        count: usize,
        seed: u64,
        azimuth_deg: Option<f64>,
    },
    Train {
        family: ModelFamily,
        /// Dataset manifest path as resolved at run time.
        data: PathBuf,
        train: TrainConfig,
    },
    Benchmark {
        nonstat_type: u8,
        /// Checkpoint directory of the model under test.
        model: PathBuf,
        /// Optional second checkpoint the model is compared against.
        baseline: Option<PathBuf>,
        cell_size_m: f64,
        variogram: VariogramKind,
        ranges_m: Vec<f64>,
        proportions: Vec<f64>,
        n_real: usize,
        seed: u64,
        azimuth_deg: Option<f64>,
    },
    ImportWeights {
        weights: PathBuf,
        meta: PathBuf,
    },
}

impl CommandConfig {
    /// The seed all of the run's randomness derives from.
    pub fn base_seed(&self) -> u64 {
        match self {
            CommandConfig::Generate { seed, .. } => *seed,
            CommandConfig::Train { train, .. } => train.seed,
            CommandConfig::Benchmark { seed, .. } => *seed,
            CommandConfig::ImportWeights { .. } => 0,
        }
    }
}

/// Record of one run: command line, resolved configuration, base seed, and
/// SHA-256 digests of every file consumed and produced.
///
/// Exactly one manifest sits in each artifact directory. Input digests are
/// keyed by path as used at run time (relative paths resolve against the
/// reproducing process's working directory); output digests are keyed by
/// `/`-separated path relative to the artifact directory and never include
/// the manifest itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Arguments as invoked, program name omitted.
    pub argv: Vec<String>,
    pub base_seed: u64,
    pub command: CommandConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    /// Serializes the manifest as pretty JSON.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&p, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(&p, e))
    }

    /// Loads a manifest, rejecting layouts newer than this tool understands.
    pub fn read_file(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        if manifest.format_version > FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "{p}: manifest format {} is newer than the supported format {}",
                manifest.format_version, FORMAT_VERSION
            )));
        }
        Ok(manifest)
    }
}

/// SHA-256 of a file's bytes as lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}

/// Digests every file under `dir`, keyed by `/`-separated relative path,
/// skipping the run manifest itself.
pub fn digest_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    digest_dir(dir, Path::new(""), &mut out)?;
    Ok(out)
}

fn digest_dir(root: &Path, rel: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let dir = root.join(rel);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let kind = entry
            .file_type()
            .map_err(|e| Error::io(entry.path().display().to_string(), e))?;
        let rel_child = rel.join(entry.file_name());
        if kind.is_dir() {
            digest_dir(root, &rel_child, out)?;
        } else {
            let key = rel_child
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if key == MANIFEST_FILE {
                continue;
            }
            out.insert(key, file_digest(&entry.path())?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable_and_manifest_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "x,y\n1,2\n").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub").join("b.bin"), [0u8, 1, 2]).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();

        let digests = digest_outputs(dir.path()).unwrap();
        let keys: Vec<&str> = digests.keys().map(String::as_str).collect();
        assert_eq!(keys, ["a.csv", "sub/b.bin"]);
        assert_eq!(digests, digest_outputs(dir.path()).unwrap());
        assert_eq!(
            digests["a.csv"],
            file_digest(&dir.path().join("a.csv")).unwrap()
        );
        assert_eq!(digests["a.csv"].len(), 64);
    }

    #[test]
    fn manifests_round_trip_and_reject_future_formats() {
        let mf = RunManifest {
            format_version: FORMAT_VERSION,
            tool_version: "0.0.0".into(),
            argv: vec!["import-weights".into()],
            base_seed: 9,
            command: CommandConfig::ImportWeights {
                weights: PathBuf::from("w.nta"),
                meta: PathBuf::from("m.json"),
            },
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        mf.write_file(&path).unwrap();
        assert_eq!(RunManifest::read_file(&path).unwrap(), mf);

        let mut future = mf;
        future.format_version = FORMAT_VERSION + 1;
        future.write_file(&path).unwrap();
        let err = RunManifest::read_file(&path).err().unwrap();
        assert!(err.to_string().contains("newer than the supported format"));
    }
}
