//! Checkpoint file: 8-byte little-endian manifest length, the JSON
//! manifest, then every tensor as row-major little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use suffixlab_engine::{Scalar, Tensor};

use crate::error::{LabError, Result};
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset from the start of the data section.
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the data section.
    pub data_sha256: String,
}

/// Serialise to bytes; parameters are stored as `f32` whatever `T` is.
pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: data.len(),
        });
        for &x in t.data() {
            data.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

/// Write atomically: a temporary file in the target directory, then rename.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode_checkpoint(model))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LabError::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&fs::read(path)?, path)
}

/// Read only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path)?;
    split(&bytes, path).map(|(m, _)| m)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> LabError {
    LabError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(corrupt(path, "file shorter than the length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER || header_len as usize > bytes.len() - 8 {
        return Err(corrupt(
            path,
            format!("manifest length {header_len} exceeds file"),
        ));
    }
    let header = &bytes[8..8 + header_len as usize];
    let value: serde_json::Value = serde_json::from_slice(header)
        .map_err(|e| corrupt(path, format!("manifest is not JSON: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt(path, "manifest lacks format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(LabError::UnknownVersion(version as u32));
    }
    let manifest: CheckpointManifest =
        serde_json::from_value(value).map_err(|e| corrupt(path, format!("bad manifest: {e}")))?;
    Ok((manifest, &bytes[8 + header_len as usize..]))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let (manifest, data) = split(bytes, path)?;
    let config = manifest.config;
    config
        .validate()
        .map_err(|e| corrupt(path, format!("invalid model config: {e}")))?;
    let expected = config.param_shapes();
    if manifest.tensors.len() != expected.len() {
        return Err(corrupt(
            path,
            format!(
                "{} tensors, config implies {}",
                manifest.tensors.len(),
                expected.len()
            ),
        ));
    }
    let mut offset = 0;
    let mut named = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(expected) {
        if entry.name != name {
            return Err(corrupt(
                path,
                format!("tensor {} where {name} expected", entry.name),
            ));
        }
        if entry.shape != shape {
            return Err(LabError::ShapeMismatch {
                name,
                got: entry.shape.clone(),
                expected: shape,
            });
        }
        if entry.dtype != "f32" {
            return Err(corrupt(
                path,
                format!("tensor {name} has dtype {}", entry.dtype),
            ));
        }
        if entry.byte_offset != offset {
            return Err(corrupt(
                path,
                format!(
                    "tensor {name} at offset {}, expected {offset}",
                    entry.byte_offset
                ),
            ));
        }
        let numel: usize = shape.iter().product();
        let end = offset + 4 * numel;
        if end > data.len() {
            return Err(corrupt(
                path,
                format!("data truncated inside tensor {name}"),
            ));
        }
        let values: Vec<f32> = data[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, values)?));
        offset = end;
    }
    if offset != data.len() {
        return Err(corrupt(
            path,
            format!("{} trailing bytes", data.len() - offset),
        ));
    }
    if hex::encode(Sha256::digest(data)) != manifest.data_sha256 {
        return Err(corrupt(path, "data checksum mismatch"));
    }
    Model::from_named(config, named)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::init(ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq_len: 12,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn decode_inverts_encode() {
        let m = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&m), Path::new("mem")).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn unknown_version_named() {
        let bytes = encode_checkpoint(&tiny());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n])
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":9");
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[8 + n..]);
        let err = decode_checkpoint(&out, Path::new("mem")).unwrap_err();
        assert!(matches!(err, LabError::UnknownVersion(9)));
    }
}
