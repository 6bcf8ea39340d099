//! Binary weight archive: named, shaped `f32` tensors in one file.
//!
//! Layout: an 8-byte magic, a little-endian `u64` with the byte length of a
//! JSON index, the index itself, then the concatenated raw little-endian
//! `f32` payloads. The index records name, shape, and element offset of each
//! entry, so single tensors can be located without reading the payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NTARCH1\n";

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    offset: usize,
    len: usize,
}

/// Writes entries to `path`, preserving order. Duplicate names are rejected.
pub fn save_weights(path: &Path, entries: &[WeightEntry]) -> Result<()> {
    let p = path.display().to_string();
    let mut index = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    for e in entries {
        if index.iter().any(|i: &IndexEntry| i.name == e.name) {
            return Err(Error::BadArchive {
                path: p,
                reason: format!("duplicate tensor name {:?}", e.name),
            });
        }
        let expect: usize = e.shape.iter().product();
        if expect != e.data.len() {
            return Err(Error::BadArchive {
                path: p,
                reason: format!(
                    "tensor {:?} has {} elements but shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                ),
            });
        }
        index.push(IndexEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
            len: e.data.len(),
        });
        offset += e.data.len();
    }
    let index_json = serde_json::to_vec(&index).map_err(|e| Error::json(&p, e))?;
    let mut bytes = Vec::with_capacity(16 + index_json.len() + offset * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(index_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&index_json);
    for e in entries {
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Reads an archive back, returning entries in stored order.
pub fn load_weights(path: &Path) -> Result<Vec<WeightEntry>> {
    let p = path.display().to_string();
    let mut file = fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(&p, e))?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: p,
            reason: format!("{} bytes is shorter than the archive preamble", bytes.len()),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadArchive { path: p, reason: "bad magic".into() });
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + index_len {
        return Err(Error::Truncated {
            path: p,
            reason: "file ends inside the index".into(),
        });
    }
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes[16..16 + index_len])
        .map_err(|e| Error::json(&p, e))?;
    let payload = &bytes[16 + index_len..];
    if payload.len() % 4 != 0 {
        return Err(Error::Truncated {
            path: p,
            reason: "payload is not a whole number of f32 values".into(),
        });
    }
    let n_values = payload.len() / 4;
    let mut entries = Vec::with_capacity(index.len());
    let mut seen = std::collections::HashSet::new();
    for ie in index {
        if !seen.insert(ie.name.clone()) {
            return Err(Error::BadArchive {
                path: p,
                reason: format!("duplicate tensor name {:?}", ie.name),
            });
        }
        let expect: usize = ie.shape.iter().product();
        if expect != ie.len {
            return Err(Error::BadArchive {
                path: p,
                reason: format!("tensor {:?}: shape {:?} disagrees with length {}", ie.name, ie.shape, ie.len),
            });
        }
        let end = ie.offset.checked_add(ie.len).filter(|&e| e <= n_values);
        let Some(_) = end else {
            return Err(Error::Truncated {
                path: p,
                reason: format!("tensor {:?} extends past the payload", ie.name),
            });
        };
        let data: Vec<f32> = payload[ie.offset * 4..(ie.offset + ie.len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(WeightEntry { name: ie.name, shape: ie.shape, data });
    }
    Ok(entries)
}
