//! Reader and writer for the safetensors container layout: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}` plus an optional `__metadata__` string map,
//! then the raw little-endian data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use galip_autograd::Tensor;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    start: usize,
    end: usize,
}

/// A parsed tensor file. Tensors are decoded on access so that a damaged
/// entry is reported by name.
pub struct TensorFile {
    path: PathBuf,
    entries: BTreeMap<String, Entry>,
    metadata: BTreeMap<String, String>,
    data: Vec<u8>,
}

impl TensorFile {
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::WeightsNotFound(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        Self::parse(path, bytes)
    }

    fn parse(path: &Path, bytes: Vec<u8>) -> Result<Self> {
        let bad = |reason: String| Error::TensorFile { path: path.to_path_buf(), reason };
        if bytes.len() < 8 {
            return Err(bad("file shorter than the header length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if 8 + header_len > bytes.len() {
            return Err(bad(format!("header of {header_len} bytes exceeds file size")));
        }
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| bad(format!("header is not a JSON object: {e}")))?;
        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, v) in header {
            if name == "__metadata__" {
                let m = v.as_object().ok_or_else(|| bad("__metadata__ is not an object".into()))?;
                for (k, v) in m {
                    let s = v.as_str().ok_or_else(|| bad(format!("metadata `{k}` is not a string")))?;
                    metadata.insert(k.clone(), s.to_string());
                }
                continue;
            }
            let dtype = match v.get("dtype").and_then(Value::as_str) {
                Some("F32") => Dtype::F32,
                Some("F64") => Dtype::F64,
                other => return Err(bad(format!("tensor `{name}` has unsupported dtype {other:?}"))),
            };
            let shape: Vec<usize> = v
                .get("shape")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
                .ok_or_else(|| bad(format!("tensor `{name}` has no valid shape")))?;
            let offsets: Vec<usize> = v
                .get("data_offsets")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
                .filter(|o: &Vec<usize>| o.len() == 2)
                .ok_or_else(|| bad(format!("tensor `{name}` has no valid data_offsets")))?;
            entries.insert(name, Entry { dtype, shape, start: offsets[0], end: offsets[1] });
        }
        let data = bytes[8 + header_len..].to_vec();
        Ok(Self { path: path.to_path_buf(), entries, metadata, data })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingTensor(format!("__metadata__.{key}")))
    }

    /// Decodes `name`; a missing entry or one whose bytes run past the end
    /// of the file is reported as [`Error::MissingTensor`].
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let n: usize = e.shape.iter().product();
        if e.end > self.data.len() || e.start > e.end || e.end - e.start != n * e.dtype.size() {
            return Err(Error::MissingTensor(name.to_string()));
        }
        let raw = &self.data[e.start..e.end];
        let values = match e.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok(Tensor::new(e.shape.clone(), values))
    }

    /// Decodes `name` and checks its shape.
    pub fn tensor_shaped(&self, name: &str, expected: &[usize]) -> Result<Tensor> {
        if let Some(found) = self.shape(name) {
            if found != expected {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: found.to_vec(),
                });
            }
        }
        self.tensor(name)
    }
}

/// Writes tensors in the given order with the given metadata.
pub fn write_tensor_file(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Result<()> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        let len = t.numel() * dtype.size();
        header.insert(
            name.clone(),
            json!({ "dtype": dtype.name(), "shape": t.shape(), "data_offsets": [offset, offset + len] }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}
