use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{Patch, PatchTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub max_shift_px: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 30.0,
            max_shift_px: 25.0,
            flip_prob: 0.5,
        }
    }
}

/// One drawn transform, shared by all patches of a triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub shift_rows: f64,
    pub shift_cols: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

impl AugmentConfig {
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::default();
        }
        let sym = |rng: &mut dyn rand::RngCore, max: f64| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        AugmentParams {
            angle_deg: sym(rng, self.max_rotation_deg),
            shift_rows: sym(rng, self.max_shift_px),
            shift_cols: sym(rng, self.max_shift_px),
            flip_h: rng.random_bool(self.flip_prob.clamp(0.0, 1.0)),
            flip_v: rng.random_bool(self.flip_prob.clamp(0.0, 1.0)),
        }
    }
}

/// Flip, rotate about the patch center, then shift. Output pixels are
/// pulled back through the inverse map with bilinear interpolation; pixels
/// that land outside the source take the patch mean.
pub fn augment_patch(patch: &Patch, t: &AugmentParams) -> Patch {
    if t.is_identity() {
        return patch.clone();
    }
    let fill = patch.mean() as f32;
    let cr = (patch.rows as f64 - 1.0) / 2.0;
    let cc = (patch.cols as f64 - 1.0) / 2.0;
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let mut data = Vec::with_capacity(patch.data.len());
    for r in 0..patch.rows {
        for c in 0..patch.cols {
            let y = r as f64 - t.shift_rows - cr;
            let x = c as f64 - t.shift_cols - cc;
            // inverse rotation
            let mut ys = cos * y - sin * x;
            let mut xs = sin * y + cos * x;
            if t.flip_v {
                ys = -ys;
            }
            if t.flip_h {
                xs = -xs;
            }
            data.push(patch.sample(ys + cr, xs + cc, fill));
        }
    }
    Patch {
        rows: patch.rows,
        cols: patch.cols,
        data,
    }
}

pub fn augment_triplet(triplet: &PatchTriplet, t: &AugmentParams) -> PatchTriplet {
    if t.is_identity() {
        return triplet.clone();
    }
    let patches = triplet.patches().map(|p| augment_patch(&p, t));
    PatchTriplet::from_patches(triplet.lesion_id, triplet.label, &patches).expect("same-sized patches")
}
