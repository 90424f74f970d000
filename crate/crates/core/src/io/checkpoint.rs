//! Checkpoints: a JSON manifest at `path` and the raw little-endian tensor
//! bytes at `path.bin`, tensors packed back to back in store order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

const FORMAT: &str = "revit-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    /// Architecture description stored alongside the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

/// `revit.ckpt` → `revit.ckpt.bin`
pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Serializes `store` into manifest and blob bytes.
pub fn encode_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    blob_name: &str,
    meta: Option<serde_json::Value>,
) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_elements() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: blob.len() as u64,
        });
        t.data().iter().for_each(|v| v.write_le(&mut blob));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob_name.into(),
        blob_bytes: blob.len() as u64,
        tensors,
        meta,
    };
    (manifest, blob)
}

/// Rebuilds a store from manifest and blob, checking every entry.
pub fn decode_checkpoint<T: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore<T>> {
    let corrupt = |tensor: &str, message: String| Error::CorruptCheckpoint {
        tensor: tensor.to_string(),
        message,
    };
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(corrupt(
            "<manifest>",
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    if manifest.blob_bytes != blob.len() as u64 {
        return Err(corrupt(
            "<manifest>",
            format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
        ));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(corrupt(&e.name, format!("dtype {} but loading {}", e.dtype, T::DTYPE)));
        }
        if e.offset != expected_offset {
            return Err(corrupt(
                &e.name,
                format!("offset {} but previous tensors end at {expected_offset}", e.offset),
            ));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count == 0 {
            return Err(corrupt(&e.name, format!("invalid shape {:?}", e.shape)));
        }
        let end = e.offset + (count * T::BYTES) as u64;
        if end > blob.len() as u64 {
            return Err(corrupt(
                &e.name,
                format!("shape {:?} needs bytes up to {end}, blob has {}", e.shape, blob.len()),
            ));
        }
        let bytes = &blob[e.offset as usize..end as usize];
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| corrupt(&e.name, err.to_string()))?;
        store
            .insert(e.name.clone(), t)
            .map_err(|err| corrupt(&e.name, err.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(corrupt(
            "<manifest>",
            format!("{} trailing blob bytes", blob.len() as u64 - expected_offset),
        ));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Validation(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode_checkpoint(store, &blob_name, meta);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads just the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads a checkpoint and its optional metadata.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Option<serde_json::Value>)> {
    let manifest = read_manifest(path)?;
    let blob_file = path.parent().unwrap_or_else(|| Path::new("")).join(&manifest.blob);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let store = decode_checkpoint(&manifest, &blob)?;
    Ok((store, manifest.meta))
}
