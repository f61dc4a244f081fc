use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int16,
    Uint16,
}

/// JSON sidecar describing a raw voxel file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
}

impl VolumeHeader {
    fn dtype(&self) -> Result<Dtype> {
        match self.dtype.as_str() {
            "int16" => Ok(Dtype::Int16),
            "uint16" => Ok(Dtype::Uint16),
            other => Err(Error::Format(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Dense 3-D grid stored x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape(format!(
                "grid {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> T {
        self.data[self.index(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: T) {
        let i = self.index(p);
        self.data[i] = v;
    }
}

/// CT intensities (HU) with a lesion-id mask on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeWithMask {
    pub intensities: Grid<i16>,
    pub mask: Grid<u16>,
    /// Voxel size `(dx, dy, dz)` in millimetres.
    pub spacing: [f64; 3],
}

impl VolumeWithMask {
    pub fn new(intensities: Grid<i16>, mask: Grid<u16>, spacing: [f64; 3]) -> Result<Self> {
        if intensities.dims != mask.dims {
            return Err(Error::shape(format!(
                "mask dims {:?} differ from volume dims {:?}",
                mask.dims, intensities.dims
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            intensities,
            mask,
            spacing,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.intensities.dims
    }
}

fn sidecar(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let json = sidecar(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if header.order != "little" {
        return Err(Error::Format(format!(
            "{}: unsupported byte order `{}`",
            json.display(),
            header.order
        )));
    }
    Ok(header)
}

/// Reads `<name>.json` + `<name>.raw`; `path` may name either file or the
/// common stem.
fn read_raw(path: &Path, want: Dtype) -> Result<(VolumeHeader, Vec<u16>)> {
    let header = read_header(path)?;
    let dtype = header.dtype()?;
    if dtype != want {
        return Err(Error::Format(format!(
            "{}: expected dtype {want:?}, found {dtype:?}",
            sidecar(path).display()
        )));
    }
    let raw = raw_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = 2 * header.dims.iter().product::<usize>() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::ByteCount {
            path: raw,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let words = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((header, words))
}

pub fn load_volume(volume: &Path, mask: &Path) -> Result<VolumeWithMask> {
    let (vh, v) = read_raw(volume, Dtype::Int16)?;
    let (mh, m) = read_raw(mask, Dtype::Uint16)?;
    if vh.dims != mh.dims {
        return Err(Error::shape(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mh.dims, vh.dims
        )));
    }
    let intensities = Grid::new(vh.dims, v.into_iter().map(|w| w as i16).collect())?;
    let mask = Grid::new(mh.dims, m)?;
    VolumeWithMask::new(intensities, mask, vh.spacing)
}

fn write_raw(path: &Path, dims: [usize; 3], spacing: [f64; 3], dtype: &str, words: impl Iterator<Item = u16>) -> Result<()> {
    let header = VolumeHeader {
        dims,
        spacing,
        dtype: dtype.to_string(),
        order: "little".to_string(),
    };
    let json = sidecar(path);
    fs::write(&json, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    let bytes: Vec<u8> = words.flat_map(u16::to_le_bytes).collect();
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

/// Writes the volume and mask as two sidecar/raw pairs next to `volume` and `mask`.
pub fn save_volume(vm: &VolumeWithMask, volume: &Path, mask: &Path) -> Result<()> {
    write_raw(
        volume,
        vm.dims(),
        vm.spacing,
        "int16",
        vm.intensities.data.iter().map(|&v| v as u16),
    )?;
    write_raw(mask, vm.dims(), vm.spacing, "uint16", vm.mask.data.iter().copied())
}
