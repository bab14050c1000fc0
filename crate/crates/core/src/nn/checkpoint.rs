//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SOKDCKPT" | u32 version | u64 manifest_len | manifest (TOML, UTF-8)
//! blob*       where blob = u64 byte_len | f32 values
//! ```
//!
//! The manifest lists the architecture, run metadata and one
//! `(name, shape, offset)` entry per tensor; `offset` is the position of the
//! blob's length prefix relative to the end of the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, ModelSpec, Network, SequentialModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SOKDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SequentialModel,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    input_shape: Vec<usize>,
    layer_count: usize,
    layers: Vec<String>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn save_checkpoint(model: &SequentialModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
        });
        let bytes = t.to_le_bytes();
        blobs.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        blobs.extend_from_slice(&bytes);
    }
    let spec = model.spec();
    let manifest = Manifest {
        input_shape: spec.input_shape.clone(),
        layer_count: spec.layers.len(),
        layers: spec.layer_strings(),
        meta: meta.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("cannot encode manifest: {e}"),
    })?;
    let mut out = Vec::with_capacity(24 + text.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blobs);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt_err("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(mlen))
        .ok_or_else(|| fmt_err("truncated manifest".into()))?;
    let text = std::str::from_utf8(body).map_err(|e| fmt_err(format!("manifest is not UTF-8: {e}")))?;
    let manifest: Manifest =
        toml::from_str(text).map_err(|e| fmt_err(format!("malformed manifest: {e}")))?;
    let blobs = &bytes[20 + mlen..];

    if manifest.layer_count != manifest.layers.len() {
        return Err(Error::ManifestMismatch(format!(
            "layer_count is {} but {} layers are listed",
            manifest.layer_count,
            manifest.layers.len()
        )));
    }
    let spec = ModelSpec::parse(manifest.input_shape.clone(), &manifest.layers)
        .map_err(|e| Error::ManifestMismatch(format!("architecture does not validate: {e}")))?;
    spec.infer_shapes()
        .map_err(|e| Error::ManifestMismatch(format!("architecture does not validate: {e}")))?;

    let mut entries = manifest.tensors.iter();
    let mut consumed = 0usize;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        let mut params = Vec::new();
        for (suffix, shape) in ls.kind.param_suffixes().iter().zip(ls.kind.param_shapes()) {
            let name = format!("{}.{suffix}", ls.name);
            let entry = entries.next().ok_or_else(|| {
                Error::ManifestMismatch(format!("tensor `{name}` missing from manifest"))
            })?;
            if entry.name != name || entry.shape != shape {
                return Err(Error::ManifestMismatch(format!(
                    "expected `{name}` {shape:?}, manifest has `{}` {:?}",
                    entry.name, entry.shape
                )));
            }
            let off = entry.offset as usize;
            let len = blobs
                .get(off..off + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| fmt_err(format!("blob for `{name}` out of bounds")))?;
            let numel: usize = shape.iter().product();
            if len != numel * 4 {
                return Err(fmt_err(format!("blob for `{name}` has {len} bytes, expected {}", numel * 4)));
            }
            let raw = blobs
                .get(off + 8..off + 8 + len)
                .ok_or_else(|| fmt_err(format!("blob for `{name}` truncated")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data)?);
            consumed += 8 + len;
        }
        layers.push(Layer {
            spec: ls.clone(),
            params,
        });
    }
    if let Some(extra) = entries.next() {
        return Err(Error::ManifestMismatch(format!(
            "manifest lists unexpected tensor `{}`",
            extra.name
        )));
    }
    if consumed != blobs.len() {
        return Err(fmt_err(format!(
            "{} trailing bytes after tensor blobs",
            blobs.len().saturating_sub(consumed)
        )));
    }
    Ok(Checkpoint {
        model: SequentialModel::from_layers(spec.input_shape, layers)?,
        meta: manifest.meta,
    })
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.spec();
    if &found != expected {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint architecture {:?} (input {:?}) differs from expected {:?} (input {:?})",
            found.layer_strings(),
            found.input_shape,
            expected.layer_strings(),
            expected.input_shape
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    fn model() -> SequentialModel {
        let spec = ModelSpec::parse(vec![4], &["dense 4 5", "relu", "norm", "dense 5 3"]).unwrap();
        build_model(&spec, 42).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 42,
            epoch: 3,
            mode: "vanilla".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &meta(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta());
        assert_eq!(back.model.param_checksum(), m.param_checksum());
        assert_eq!(back.model, m);
        assert!(load_checkpoint_expecting(&path, &m.spec()).is_ok());
    }

    #[test]
    fn edited_layer_count_is_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &meta(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[20..20 + mlen]).unwrap();
        let edited = text.replace("layer_count = 4", "layer_count = 5");
        assert_ne!(edited, text);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[20 + mlen..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn architecture_mismatch_and_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &meta(), &path).unwrap();
        let other = ModelSpec::parse(vec![4], &["dense 4 3"]).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::ManifestMismatch(_))
        ));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &meta(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
