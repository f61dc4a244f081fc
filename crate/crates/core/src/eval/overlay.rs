use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::data::{Label, VolumeWithMask};
use crate::error::{Error, Result};

pub const WINDOW_LEVEL: f64 = 60.0;
pub const WINDOW_WIDTH: f64 = 400.0;
const ALPHA: f64 = 0.5;

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn at(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn window(hu: f64) -> u8 {
    let lo = WINDOW_LEVEL - WINDOW_WIDTH / 2.0;
    ((hu - lo) / WINDOW_WIDTH * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Axial slice `z` of the volume, window-levelled, with predicted lesions
/// tinted green (cyst) or red (metastasis). Rows run along y, columns along x.
pub fn render_overlay(vm: &VolumeWithMask, predictions: &BTreeMap<u32, Label>, z: usize) -> Result<RgbImage> {
    let [nx, ny, nz] = vm.dims();
    if z >= nz {
        return Err(Error::invalid(format!("slice {z} outside volume depth {nz}")));
    }
    let present: BTreeSet<u32> = vm.mask.data.iter().map(|&m| m as u32).collect();
    if let Some(id) = predictions.keys().find(|id| !present.contains(id) || **id == 0) {
        return Err(Error::invalid(format!("prediction for lesion {id}, which is not in the mask")));
    }
    let mut pixels = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let g = window(vm.intensities.get([x, y, z]) as f64);
            let id = vm.mask.get([x, y, z]) as u32;
            let tint = match predictions.get(&id) {
                Some(Label::Cyst) => Some([0u8, 255, 0]),
                Some(Label::Metastasis) => Some([255u8, 0, 0]),
                None => None,
            };
            pixels.push(match tint {
                Some(t) => t.map(|c| ((1.0 - ALPHA) * g as f64 + ALPHA * c as f64).round() as u8),
                None => [g; 3],
            });
        }
    }
    Ok(RgbImage {
        width: nx,
        height: ny,
        pixels,
    })
}
