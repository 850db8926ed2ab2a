//! Named-tensor checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"PKBNNCKP"            8-byte magic
//! u64 little-endian      length of the JSON index in bytes
//! JSON index             {"version":1,"tensors":[{"name","dtype","shape","offset"}...]}
//! raw data               little-endian f64 values; offsets are relative to the data start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NnError, Tensor};

pub const MAGIC: &[u8; 8] = b"PKBNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: [usize; 4],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    tensors: Vec<Entry>,
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: t.shape,
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let index = serde_json::to_vec(&Index {
        version: CHECKPOINT_VERSION,
        tensors: entries,
    })
    .expect("index serializes");
    let mut out = Vec::with_capacity(16 + index.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let index_end = 16usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated index"))?;
    let index: Index = serde_json::from_slice(&bytes[16..index_end]).map_err(|e| bad(&format!("index: {e}")))?;
    if index.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", index.version)));
    }
    let data = &bytes[index_end..];
    let mut out = BTreeMap::new();
    for e in index.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let len: usize = e.shape.iter().product();
        let lo = e.offset as usize;
        let hi = lo + 8 * len;
        if hi > data.len() {
            return Err(bad(&format!("{}: data out of range", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(e.name, Tensor::new(e.shape, vals)?);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode_tensors(&model.state_dict())).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<(), NnError> {
    let bytes = fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    model.load_state_dict(decode_tensors(&bytes)?)
}
