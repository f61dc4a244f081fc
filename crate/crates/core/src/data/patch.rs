use serde::{Deserialize, Serialize};

use super::lesion::{centroid, mask_crop, select_principal_plane, Label, LesionExtent};
use super::volume::VolumeWithMask;
use crate::error::{Error, Result};

pub const DEFAULT_TARGET: (usize, usize) = (252, 210);
pub const STD_GUARD: f64 = 1e-6;

/// Row-major 2-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} patch needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len().max(1) as f64).sqrt()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Bilinear sample at fractional `(r, c)`; `fill` outside the frame.
    pub fn sample(&self, r: f64, c: f64, fill: f32) -> f32 {
        const TOL: f64 = 1e-9;
        let (hr, hc) = ((self.rows - 1) as f64, (self.cols - 1) as f64);
        if !(r >= -TOL && r <= hr + TOL && c >= -TOL && c <= hc + TOL) {
            return fill;
        }
        let r = r.clamp(0.0, hr);
        let c = c.clamp(0.0, hc);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.rows - 1), (c0 + 1).min(self.cols - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let top = self.at(r0, c0) as f64 * (1.0 - fc) + self.at(r0, c1) as f64 * fc;
        let bottom = self.at(r1, c0) as f64 * (1.0 - fc) + self.at(r1, c1) as f64 * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    }
}

/// The two in-plane axes for a plane normal to `axis`: `(col_axis, row_axis)`.
pub fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Intensity crop of the lesion bounding box in the plane `axis = index`
/// (global voxel index). Rows run along the higher remaining axis.
pub fn plane_crop(vm: &VolumeWithMask, lesion: &LesionExtent, axis: usize, index: usize) -> Result<Patch> {
    let (ca, ra) = plane_axes(axis);
    let b = &lesion.bbox;
    let (rows, cols) = (b.max[ra] - b.min[ra] + 1, b.max[ca] - b.min[ca] + 1);
    let mut data = Vec::with_capacity(rows * cols);
    let mut hits = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[ra] = b.min[ra] + r;
            p[ca] = b.min[ca] + c;
            data.push(vm.intensities.get(p) as f32);
            hits += usize::from(vm.mask.get(p) == lesion.lesion_id);
        }
    }
    if hits == 0 {
        return Err(Error::invalid(format!(
            "lesion {}: plane axis {axis} index {index} contains no lesion voxels",
            lesion.lesion_id
        )));
    }
    Patch::new(rows, cols, data)
}

/// Which three planes make up a lesion's triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletPlanes {
    /// Principal plane plus the two orthogonal planes through the centroid.
    #[default]
    Orthogonal,
    /// Principal plane plus its two neighbouring parallel slices, clamped to
    /// the bounding box.
    Adjacent,
}

/// Raw crops: the principal plane, then the two orthogonal planes through
/// the rounded mask centroid in ascending axis order.
pub fn raw_triplet(vm: &VolumeWithMask, lesion: &LesionExtent) -> Result<[Patch; 3]> {
    raw_triplet_with(vm, lesion, TripletPlanes::Orthogonal)
}

pub fn raw_triplet_with(vm: &VolumeWithMask, lesion: &LesionExtent, planes: TripletPlanes) -> Result<[Patch; 3]> {
    let crop = mask_crop(vm, lesion);
    let (axis, local) = select_principal_plane(&crop);
    if planes == TripletPlanes::Adjacent {
        let (lo, hi) = (lesion.bbox.min[axis], lesion.bbox.max[axis]);
        let at = |i: usize| plane_crop(vm, lesion, axis, i.clamp(lo, hi));
        let i = lo + local;
        return Ok([at(i)?, at(i.saturating_sub(1))?, at(i + 1)?]);
    }
    let c = centroid(&crop).ok_or_else(|| Error::invalid(format!("lesion {} is empty", lesion.lesion_id)))?;
    let principal = plane_crop(vm, lesion, axis, lesion.bbox.min[axis] + local)?;
    let mut others = (0..3).filter(|&a| a != axis).map(|a| plane_crop(vm, lesion, a, lesion.bbox.min[a] + c[a]));
    let p1 = others.next().expect("two orthogonal planes")?;
    let p2 = others.next().expect("two orthogonal planes")?;
    Ok([principal, p1, p2])
}

/// Three normalized patches of one lesion, each exactly the target size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchTriplet {
    pub lesion_id: u32,
    pub label: Label,
    pub rows: usize,
    pub cols: usize,
    /// `3 * rows * cols` values, patch-major.
    pub data: Vec<f32>,
}

impl PatchTriplet {
    pub fn from_patches(lesion_id: u32, label: Label, patches: &[Patch; 3]) -> Result<Self> {
        let (rows, cols) = patches[0].size();
        if patches.iter().any(|p| p.size() != (rows, cols)) {
            return Err(Error::shape("triplet patches differ in size"));
        }
        Ok(Self {
            lesion_id,
            label,
            rows,
            cols,
            data: patches.iter().flat_map(|p| p.data.iter().copied()).collect(),
        })
    }

    pub fn patch(&self, i: usize) -> Patch {
        let n = self.rows * self.cols;
        Patch {
            rows: self.rows,
            cols: self.cols,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn patches(&self) -> [Patch; 3] {
        [self.patch(0), self.patch(1), self.patch(2)]
    }
}

/// Raw triplet → crop/pad to `target` → per-patch normalization.
pub fn extract_patch_triplet(
    vm: &VolumeWithMask,
    lesion: &LesionExtent,
    lesion_id: u32,
    label: Label,
    target: (usize, usize),
    planes: TripletPlanes,
) -> Result<PatchTriplet> {
    let raw = raw_triplet_with(vm, lesion, planes)?;
    let done = raw.map(|p| normalize(&crop_pad(&p, target)));
    PatchTriplet::from_patches(lesion_id, label, &done)
}

/// Centers `patch` in a `target` frame filled with the patch mean;
/// dimensions larger than the target are center-cropped.
pub fn crop_pad(patch: &Patch, target: (usize, usize)) -> Patch {
    let (tr, tc) = target;
    let fill = patch.mean() as f32;
    let mut out = Patch::filled(tr, tc, fill);
    // (source offset, destination offset, length) per dimension
    let span = |n: usize, t: usize| if n >= t { ((n - t) / 2, 0, t) } else { (0, (t - n) / 2, n) };
    let (sr, dr, nr) = span(patch.rows, tr);
    let (sc, dc, nc) = span(patch.cols, tc);
    for r in 0..nr {
        let src = (sr + r) * patch.cols + sc;
        let dst = (dr + r) * tc + dc;
        out.data[dst..dst + nc].copy_from_slice(&patch.data[src..src + nc]);
    }
    out
}

/// `(x - mean) / max(std, 1e-6)` over the patch.
pub fn normalize(patch: &Patch) -> Patch {
    let mean = patch.mean();
    let std = patch.std().max(STD_GUARD);
    Patch {
        rows: patch.rows,
        cols: patch.cols,
        data: patch.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
    }
}

/// Bilinear resize with pixel-center alignment.
pub fn resize_bilinear(patch: &Patch, rows: usize, cols: usize) -> Patch {
    if patch.size() == (rows, cols) {
        return patch.clone();
    }
    let sy = patch.rows as f64 / rows as f64;
    let sx = patch.cols as f64 / cols as f64;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (patch.rows - 1) as f64);
        for c in 0..cols {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (patch.cols - 1) as f64);
            data.push(patch.sample(y, x, 0.0));
        }
    }
    Patch { rows, cols, data }
}
