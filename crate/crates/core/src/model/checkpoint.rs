//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes, a little-endian `u64` header length, a UTF-8
//! JSON header holding the model config, training metadata and the blob
//! directory, then the blobs as contiguous little-endian `f32` data.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFCKPT01";
const MAGIC_FAMILY: &[u8; 6] = b"LFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: TrainingMeta,
    blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    /// Blobs in model parameter order.
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainingMeta) -> Self {
        Self {
            config: model.config().clone(),
            meta,
            blobs: model
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.blobs.len());
        for (name, t) in &self.blobs {
            entries.push(BlobEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            blobs: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than the checkpoint magic".into()));
        }
        let magic = &bytes[..8];
        if magic != CHECKPOINT_MAGIC {
            if magic.starts_with(MAGIC_FAMILY) {
                return Err(Error::VersionMismatch {
                    expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Truncated("checkpoint header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| Error::Truncated(format!("checkpoint header of {header_len} bytes")))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: header.format_version.to_string(),
            });
        }
        let data = &bytes[16 + header_len..];
        let mut seen = HashSet::new();
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for entry in header.blobs {
            if !seen.insert(entry.name.clone()) {
                return Err(Error::Format(format!("duplicate blob `{}`", entry.name)));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = start
                .checked_add(4 * count)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| Error::Truncated(format!("blob `{}`", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(entry.shape, values)
                .map_err(|e| Error::Format(format!("blob `{}`: {e}", entry.name)))?;
            blobs.push((entry.name, tensor));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            blobs,
        })
    }

    /// Rebuilds the model. Every parameter needs exactly one blob of the
    /// same shape and every blob must name a parameter.
    pub fn to_model(&self) -> Result<Model> {
        let cfg = ModelConfig {
            pretrained: None,
            ..self.config.clone()
        };
        let mut model = Model::random(&cfg, 0)?;
        model.config = self.config.clone();
        let mut by_name: BTreeMap<&str, &Tensor<f32>> = self.blobs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut conflicts = Vec::new();
        for p in model.params_mut() {
            let blob = by_name
                .remove(p.name.as_str())
                .ok_or_else(|| Error::MissingBlob(p.name.clone()))?;
            if blob.shape() != p.value.shape() {
                conflicts.push(format!("{}: checkpoint {:?} vs model {:?}", p.name, blob.shape(), p.value.shape()));
                continue;
            }
            p.value = blob.clone();
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::UnknownBlob(name.to_string()));
        }
        if !conflicts.is_empty() {
            return Err(Error::BlobShapes(conflicts));
        }
        Ok(model)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(model: &Model, meta: TrainingMeta, path: &Path) -> Result<()> {
    write_checkpoint(&Checkpoint::from_model(model, meta), path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainingMeta)> {
    let ckpt = read_checkpoint(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.meta))
}
