use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::lesion::Label;
use crate::error::{Error, Result};

/// One row of the dataset manifest. Mask voxels of this lesion carry the
/// value `lesion_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub lesion_id: u32,
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub label: Label,
}

/// Reads the manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let mut row: ManifestRow = row?;
        if row.lesion_id == 0 || row.lesion_id > u16::MAX as u32 {
            return Err(Error::Format(format!(
                "{}: lesion id {} must be in 1..=65535",
                path.display(),
                row.lesion_id
            )));
        }
        for p in [&mut row.volume_path, &mut row.mask_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: manifest has no rows", path.display())));
    }
    Ok(rows)
}

/// Writes rows as given (paths are not relativized).
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
