//! Tensor checkpoints: `manifest.json` (metadata + tensor index) next to
//! `tensors.bin`, a raw little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

pub type NamedTensor<'a> = (&'a str, &'a Tensor);

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    offset: usize,
}

pub fn save(dir: &Path, meta: serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    let manifest = Manifest { version: CHECKPOINT_VERSION, meta, tensors: entries };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))
}

pub fn load(dir: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Artifact {
            path: man_path,
            detail: format!("unsupported checkpoint version {}", manifest.version),
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Artifact { path: blob_path, detail: "blob length is not a multiple of 4".into() });
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let data = floats.get(e.offset..e.offset + numel).ok_or_else(|| Error::Artifact {
            path: blob_path.clone(),
            detail: format!("tensor {} runs past the end of the blob", e.name),
        })?;
        out.push((e.name, Tensor::new(e.shape, data.to_vec())?));
    }
    Ok((manifest.meta, out))
}
