//! Single-file parameter container.
//!
//! Layout: the 8-byte magic `VSTYCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then one contiguous
//! blob of row-major little-endian `f32` values. The header names every array
//! with its shape and byte offset into the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extractor::PROJ_PREFIX;
use crate::model::{Architecture, Model};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 8] = b"VSTYCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub architecture: Architecture,
    pub seed: u64,
    pub stage: String,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: Metadata,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(architecture: Architecture, seed: u64, stage: impl Into<String>, params: ParamStore) -> Self {
        let metadata = Metadata { format_version: FORMAT_VERSION, architecture, seed, stage: stage.into(), dtype: "f32le".into() };
        Self { metadata, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for (_, name, value) in self.params.iter() {
            arrays.push(ArrayEntry { name: name.to_string(), shape: [value.nrows(), value.ncols()], offset: blob.len() as u64 });
            for v in value.iter() {
                let f = *v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("parameter `{name}`")));
                }
                blob.extend_from_slice(&f.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), arrays })?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.metadata.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Parses a whole container; nothing is returned unless every array is
    /// intact.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, this build reads version {FORMAT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let blob_start = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header runs past the end of the file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..blob_start])?;
        if header.metadata.format_version != version {
            return Err(bad("header and preamble disagree on the format version".into()));
        }
        let blob = &bytes[blob_start..];
        let mut params = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &header.arrays {
            let n = e.shape[0].checked_mul(e.shape[1]).ok_or_else(|| bad(format!("shape of `{}` overflows", e.name)))?;
            if e.offset != expected_offset {
                return Err(bad(format!("array `{}` at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(bad(format!("array `{}` needs bytes {start}..{end}, blob has {}", e.name, blob.len())));
            }
            let values: Vec<f64> =
                blob[start..end].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
            if params.contains(&e.name) {
                return Err(bad(format!("array `{}` listed twice", e.name)));
            }
            params.insert(e.name.clone(), Array2::from_shape_vec((e.shape[0], e.shape[1]), values).expect("length checked"));
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad(format!("{} trailing bytes after the last array", blob.len() - expected_offset as usize)));
        }
        Ok(Self { metadata: header.metadata, params })
    }

    /// Writes through a temporary file so a failed save never leaves a
    /// half-written checkpoint behind. Returns the file's SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Everything trainable in `model`, projector included.
    pub fn from_model(model: &Model, seed: u64, stage: impl Into<String>) -> Self {
        let mut params = model.params.clone();
        if let Some(ex) = &model.extractor {
            params.merge(&ex.projector.params);
        }
        Self::new(model.arch.clone(), seed, stage, params)
    }

    /// Rebuilds a model, refusing checkpoints made for another architecture.
    pub fn into_model(self, expected: &Architecture) -> Result<Model> {
        self.check_architecture(expected)?;
        let (mut rest, mut proj) = (ParamStore::new(), ParamStore::new());
        for (_, name, value) in self.params.iter() {
            let dst = if name.starts_with(PROJ_PREFIX) { &mut proj } else { &mut rest };
            dst.insert(name, value.clone());
        }
        Model::assemble(self.metadata.architecture, rest, (!proj.is_empty()).then_some(proj))
    }

    /// Errors unless the stored architecture equals `expected`, naming the
    /// first differing field with both values.
    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        let found = serde_json::to_value(&self.metadata.architecture)?;
        let want = serde_json::to_value(expected)?;
        match first_difference("", &found, &want) {
            None => Ok(()),
            Some((path, f, w)) => Err(Error::Checkpoint(format!(
                "architecture mismatch at `{path}`: checkpoint has {f}, current configuration has {w}"
            ))),
        }
    }
}

fn first_difference(path: &str, a: &Value, b: &Value) -> Option<(String, Value, Value)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
            })
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.clone(), b.clone())),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash over the sorted relative names and contents of every file under `dir`.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, std::path::PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root").to_string_lossy().replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
