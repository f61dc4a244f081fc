use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::volume::{Grid, VolumeWithMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cyst,
    Metastasis,
}

impl Label {
    /// Class index; metastasis is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Cyst => 0,
            Label::Metastasis => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Cyst),
            1 => Ok(Label::Metastasis),
            _ => Err(Error::invalid(format!("class index {i} is not 0 or 1"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cyst => "cyst",
            Label::Metastasis => "metastasis",
        }
    }
}

/// Inclusive voxel bounding box `(x0, x1, y0, y1, z0, z1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn as_tuple(&self) -> (usize, usize, usize, usize, usize, usize) {
        (self.min[0], self.max[0], self.min[1], self.max[1], self.min[2], self.max[2])
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Geometry of one segmented lesion.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionExtent {
    pub lesion_id: u16,
    pub bbox: BBox,
    pub voxel_count: usize,
    pub volume_ml: f64,
}

/// One record per distinct nonzero mask id, in ascending id order.
pub fn extract_lesions(vm: &VolumeWithMask) -> Result<Vec<LesionExtent>> {
    let mask = &vm.mask;
    let [nx, ny, nz] = mask.dims;
    let mut acc: BTreeMap<u16, (BBox, usize)> = BTreeMap::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let id = mask.get([x, y, z]);
                if id == 0 {
                    continue;
                }
                let p = [x, y, z];
                let entry = acc.entry(id).or_insert((BBox { min: p, max: p }, 0));
                let bbox = &mut entry.0;
                bbox.min = [0, 1, 2].map(|a| bbox.min[a].min(p[a]));
                bbox.max = [0, 1, 2].map(|a| bbox.max[a].max(p[a]));
                entry.1 += 1;
            }
        }
    }
    if acc.is_empty() {
        return Err(Error::invalid("mask has no lesion voxels"));
    }
    let voxel_ml = vm.spacing.iter().product::<f64>() / 1000.0;
    Ok(acc
        .into_iter()
        .map(|(lesion_id, (bbox, voxel_count))| LesionExtent {
            lesion_id,
            bbox,
            voxel_count,
            volume_ml: voxel_count as f64 * voxel_ml,
        })
        .collect())
}

/// Binary mask of one lesion cropped to its bounding box.
pub fn mask_crop(vm: &VolumeWithMask, lesion: &LesionExtent) -> Grid<bool> {
    let ext = lesion.bbox.extent();
    let mut out = Grid::filled(ext, false);
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let p = [x + lesion.bbox.min[0], y + lesion.bbox.min[1], z + lesion.bbox.min[2]];
                out.set([x, y, z], vm.mask.get(p) == lesion.lesion_id);
            }
        }
    }
    out
}

/// Per-slice lesion pixel counts along `axis`.
pub fn slice_counts(mask: &Grid<bool>, axis: usize) -> Vec<usize> {
    let mut counts = vec![0; mask.dims[axis]];
    let [nx, ny, nz] = mask.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get([x, y, z]) {
                    counts[[x, y, z][axis]] += 1;
                }
            }
        }
    }
    counts
}

/// `(axis, index)` of the slice with the most lesion pixels; ties go to the
/// lowest axis, then the lowest index. Axes are 0 = x, 1 = y, 2 = z.
pub fn select_principal_plane(mask: &Grid<bool>) -> (usize, usize) {
    let mut best = (0, 0, 0usize);
    for axis in 0..3 {
        for (i, &c) in slice_counts(mask, axis).iter().enumerate() {
            if c > best.2 {
                best = (axis, i, c);
            }
        }
    }
    (best.0, best.1)
}

/// Mean voxel coordinate, rounded to the nearest voxel (halves away from zero).
pub fn centroid(mask: &Grid<bool>) -> Option<[usize; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    let [nx, ny, nz] = mask.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get([x, y, z]) {
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum.map(|s| (s / n as f64).round() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut([usize; 3]) -> u16) -> VolumeWithMask {
        let mut mask = Grid::filled(dims, 0u16);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    mask.set([x, y, z], f([x, y, z]));
                }
            }
        }
        VolumeWithMask::new(Grid::filled(dims, 0i16), mask, spacing).unwrap()
    }

    fn ellipsoid(dims: [usize; 3], c: [f64; 3], r: [f64; 3]) -> Grid<bool> {
        let vm = volume(dims, [1.0; 3], |p| {
            let d: f64 = (0..3).map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2)).sum();
            u16::from(d <= 1.0)
        });
        Grid::new(dims, vm.mask.data.iter().map(|&m| m == 1).collect()).unwrap()
    }

    #[test]
    fn single_voxel_lesion() {
        let vm = volume([5, 6, 7], [0.5, 0.8, 2.0], |p| u16::from(p == [2, 3, 4]));
        let l = extract_lesions(&vm).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].bbox.as_tuple(), (2, 2, 3, 3, 4, 4));
        assert!((l[0].volume_ml - 0.5 * 0.8 * 2.0 / 1000.0).abs() < 1e-15);
        assert_eq!(select_principal_plane(&mask_crop(&vm, &l[0])), (0, 0));
    }

    #[test]
    fn two_disjoint_ids() {
        let vm = volume([6, 3, 3], [1.0; 3], |p| match p[0] {
            0 | 1 => 4,
            4 => 9,
            _ => 0,
        });
        let l = extract_lesions(&vm).unwrap();
        assert_eq!(l.iter().map(|r| r.lesion_id).collect::<Vec<_>>(), vec![4, 9]);
        assert_eq!(l[0].voxel_count, 18);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let vm = volume([3, 3, 3], [1.0; 3], |_| 0);
        assert!(extract_lesions(&vm).is_err());
    }

    #[test]
    fn sphere_volume_close_to_analytic() {
        let vm = volume([15, 15, 15], [1.0; 3], |p| {
            let d: f64 = p.iter().map(|&v| (v as f64 - 7.0).powi(2)).sum();
            u16::from(d <= 25.0)
        });
        let l = extract_lesions(&vm).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 125.0 / 1000.0;
        assert!((l[0].volume_ml - analytic).abs() / analytic < 0.1, "{}", l[0].volume_ml);
    }

    #[test]
    fn oblate_ellipsoid_picks_short_axis_center() {
        // short semi-axis along z
        let m = ellipsoid([21, 21, 7], [10.0, 10.0, 3.0], [10.0, 10.0, 3.0]);
        let oracle = (0..3)
            .flat_map(|axis| slice_counts(&m, axis).into_iter().enumerate().map(move |(i, c)| (c, axis, i)))
            .max_by_key(|&(c, axis, i)| (c, std::cmp::Reverse(axis), std::cmp::Reverse(i)))
            .unwrap();
        assert_eq!(select_principal_plane(&m), (oracle.1, oracle.2));
        assert_eq!(select_principal_plane(&m), (2, 3));
    }

    #[test]
    fn sphere_ties_pick_axis_zero_center() {
        let m = ellipsoid([11, 11, 11], [5.0; 3], [4.0; 3]);
        assert_eq!(select_principal_plane(&m), (0, 5));
    }

    #[test]
    fn l_shape_centroid_is_rounded_mean() {
        let coords = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [0, 2, 0]];
        let vm = volume([3, 3, 1], [1.0; 3], |p| u16::from(coords.contains(&p)));
        let m = Grid::new(vm.mask.dims, vm.mask.data.iter().map(|&v| v == 1).collect()).unwrap();
        // mean x = 3/5 = 0.6, mean y = 0.6
        assert_eq!(centroid(&m), Some([1, 1, 0]));
    }
}
