//! Prepared patch archive: 8 magic bytes, a little-endian `u64` header
//! length, a JSON header, then each triplet as little-endian `f32` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lesion::Label;
use super::patch::PatchTriplet;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"LFPATCH1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionMeta {
    pub lesion_id: u32,
    pub patient_id: String,
    pub label: Label,
    pub volume_ml: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    rows: usize,
    cols: usize,
    lesions: Vec<LesionMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchArchive {
    pub rows: usize,
    pub cols: usize,
    pub lesions: Vec<LesionMeta>,
    pub triplets: Vec<PatchTriplet>,
}

impl PatchArchive {
    pub fn new(rows: usize, cols: usize, lesions: Vec<LesionMeta>, triplets: Vec<PatchTriplet>) -> Result<Self> {
        if lesions.len() != triplets.len() {
            return Err(Error::shape("archive metadata and triplet counts differ"));
        }
        for (m, t) in lesions.iter().zip(&triplets) {
            if (t.rows, t.cols) != (rows, cols) || m.lesion_id != t.lesion_id || m.label != t.label {
                return Err(Error::shape(format!("triplet of lesion {} does not match the archive", t.lesion_id)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("patches of lesion {}", t.lesion_id)));
            }
        }
        Ok(Self {
            rows,
            cols,
            lesions,
            triplets,
        })
    }

    pub fn position(&self, lesion_id: u32) -> Option<usize> {
        self.lesions.iter().position(|m| m.lesion_id == lesion_id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            rows: self.rows,
            cols: self.cols,
            lesions: self.lesions.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 12 * self.rows * self.cols * self.triplets.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.triplets {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..8) != Some(ARCHIVE_MAGIC.as_slice()) {
            return Err(Error::Format("bad patch archive magic".into()));
        }
        let len = bytes
            .get(8..16)
            .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| Error::Truncated("patch archive header length".into()))?;
        let header: Header = serde_json::from_slice(
            bytes
                .get(16..16 + len)
                .ok_or_else(|| Error::Truncated("patch archive header".into()))?,
        )
        .map_err(|e| Error::Format(format!("patch archive header: {e}")))?;
        let per = 3 * header.rows * header.cols;
        let body = &bytes[16 + len..];
        if body.len() != 4 * per * header.lesions.len() {
            return Err(Error::Truncated(format!(
                "patch archive body: expected {} bytes, found {}",
                4 * per * header.lesions.len(),
                body.len()
            )));
        }
        let triplets = header
            .lesions
            .iter()
            .zip(body.chunks_exact(4 * per))
            .map(|(m, chunk)| PatchTriplet {
                lesion_id: m.lesion_id,
                label: m.label,
                rows: header.rows,
                cols: header.cols,
                data: chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            })
            .collect();
        Self::new(header.rows, header.cols, header.lesions, triplets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let triplets: Vec<PatchTriplet> = (1..=3)
            .map(|i| PatchTriplet {
                lesion_id: i,
                label: Label::Cyst,
                rows: 2,
                cols: 3,
                data: (0..18).map(|v| v as f32 * i as f32).collect(),
            })
            .collect();
        let meta = (1..=3)
            .map(|i| LesionMeta {
                lesion_id: i,
                patient_id: format!("P{i}"),
                label: Label::Cyst,
                volume_ml: 0.5 * i as f64,
            })
            .collect();
        let a = PatchArchive::new(2, 3, meta, triplets).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(PatchArchive::from_bytes(&bytes).unwrap(), a);
        assert!(PatchArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
