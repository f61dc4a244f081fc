//! Deterministic synthetic CT phantoms with cyst-like and metastasis-like
//! lesions.
//!
//! Each patient is one volume of noisy liver parenchyma with its lesions
//! laid out side by side along x. Cysts are homogeneous hypodense
//! ellipsoids; metastases have a blob-textured core and a denser rim. Lesion
//! volumes follow per-class log-normal distributions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_volume, write_manifest, Grid, Label, ManifestRow, VolumeWithMask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_lesions: usize,
    /// 0 derives the count from the lesion count (about 3.65 lesions each).
    pub n_patients: usize,
    pub seed: u64,
    pub cyst_mean_ml: f64,
    pub metastasis_mean_ml: f64,
    /// Standard deviation of log-volume for both classes.
    pub log_sigma: f64,
    pub min_ml: f64,
    pub max_ml: f64,
    pub spacing: [f64; 3],
    pub liver_hu: f64,
    pub liver_noise_hu: f64,
    pub cyst_hu: f64,
    pub cyst_noise_hu: f64,
    pub metastasis_core_hu: f64,
    pub metastasis_texture_hu: f64,
    pub metastasis_rim_hu: f64,
    /// Liver margin around each lesion, in voxels.
    pub margin: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_lesions: 230,
            n_patients: 0,
            seed: 0,
            cyst_mean_ml: 0.791,
            metastasis_mean_ml: 24.871,
            log_sigma: 1.0,
            min_ml: 0.018,
            max_ml: 534.6,
            spacing: [1.5, 1.5, 2.5],
            liver_hu: 100.0,
            liver_noise_hu: 15.0,
            cyst_hu: 0.0,
            cyst_noise_hu: 5.0,
            metastasis_core_hu: 45.0,
            metastasis_texture_hu: 25.0,
            metastasis_rim_hu: 85.0,
            margin: 4,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_lesions < 2 {
            return Err(Error::invalid("a phantom needs at least two lesions"));
        }
        if !(self.min_ml > 0.0 && self.min_ml < self.max_ml) {
            return Err(Error::invalid("need 0 < min_ml < max_ml"));
        }
        if self.spacing.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid("spacing must be positive"));
        }
        if self.cyst_mean_ml <= 0.0 || self.metastasis_mean_ml <= 0.0 || self.log_sigma < 0.0 {
            return Err(Error::invalid("volume distribution parameters must be positive"));
        }
        Ok(())
    }

    pub fn patients(&self) -> usize {
        if self.n_patients > 0 {
            self.n_patients.min(self.n_lesions)
        } else {
            ((self.n_lesions as f64 * 63.0 / 230.0).round() as usize).clamp(1, self.n_lesions)
        }
    }

    fn voxel_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }
}

/// One generated lesion.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomLesion {
    pub lesion_id: u32,
    pub patient_id: String,
    pub label: Label,
    pub volume_ml: f64,
}

pub struct PhantomSummary {
    pub lesions: Vec<PhantomLesion>,
    pub manifest: PathBuf,
}

struct Shape {
    /// Voxel offsets relative to the lesion bounding-box origin, with the
    /// normalized ellipsoid radius of each voxel.
    voxels: Vec<([usize; 3], f64)>,
    extent: [usize; 3],
}

fn voxelize(semi_mm: [f64; 3], jitter: [f64; 3], spacing: [f64; 3]) -> Shape {
    let semi = [0, 1, 2].map(|a| semi_mm[a] / spacing[a]);
    let half = semi.map(|s| s.ceil() as i64 + 1);
    let mut raw = Vec::new();
    for z in -half[2]..=half[2] {
        for y in -half[1]..=half[1] {
            for x in -half[0]..=half[0] {
                let p = [x, y, z];
                let r2: f64 = (0..3).map(|a| ((p[a] as f64 - jitter[a]) / semi[a]).powi(2)).sum();
                if r2 <= 1.0 {
                    raw.push((p, r2.sqrt()));
                }
            }
        }
    }
    if raw.is_empty() {
        raw.push(([0, 0, 0], 0.0));
    }
    let lo = [0, 1, 2].map(|a| raw.iter().map(|(p, _)| p[a]).min().expect("non-empty"));
    let hi = [0, 1, 2].map(|a| raw.iter().map(|(p, _)| p[a]).max().expect("non-empty"));
    Shape {
        voxels: raw
            .into_iter()
            .map(|(p, r)| ([0, 1, 2].map(|a| (p[a] - lo[a]) as usize), r))
            .collect(),
        extent: [0, 1, 2].map(|a| (hi[a] - lo[a] + 1) as usize),
    }
}

/// Ellipsoid with the given axis ratios whose voxel count is as close as
/// possible to `target` while staying within `[min_count, max_count]`.
fn fit_shape(target: usize, min_count: usize, max_count: usize, ratios: [f64; 3], jitter: [f64; 3], spacing: [f64; 3]) -> Shape {
    let at = |scale: f64| voxelize(ratios.map(|r| r * scale), jitter, spacing);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while at(hi).voxels.len() < target {
        hi *= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid).voxels.len() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (below, above) = (at(lo), at(hi));
    let ok = |s: &Shape| (min_count..=max_count).contains(&s.voxels.len());
    let dist = |s: &Shape| s.voxels.len().abs_diff(target);
    match (ok(&below), ok(&above)) {
        (true, true) if dist(&below) < dist(&above) => below,
        (_, true) => above,
        (true, false) => below,
        // no scale lands inside the range: take the bigger shape when the
        // range starts above the smaller one
        (false, false) if below.voxels.len() < min_count => above,
        (false, false) => below,
    }
}

/// Smooth zero-mean, unit-variance texture over the shape from random
/// Gaussian blobs.
fn blob_texture(shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n_blobs = rng.random_range(4..=8);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..n_blobs)
        .map(|_| {
            let c = shape.extent.map(|e| rng.random_range(0.0..e as f64));
            let width = shape.extent.iter().copied().max().unwrap_or(1) as f64 * rng.random_range(0.12..0.3);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (c, width.max(0.8), sign)
        })
        .collect();
    let mut t: Vec<f64> = shape
        .voxels
        .iter()
        .map(|(p, _)| {
            blobs
                .iter()
                .map(|(c, w, s)| {
                    let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
                    s * (-d2 / (2.0 * w * w)).exp()
                })
                .sum()
        })
        .collect();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
    for v in &mut t {
        *v = if std > 1e-9 { (*v - mean) / std } else { 0.0 };
    }
    t
}

fn hu(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

struct Planned {
    lesion_id: u32,
    label: Label,
    shape: Shape,
    seed: u64,
}

/// Writes `volumes/`, one sidecar/raw pair per patient and mask, and
/// `manifest.csv` under `out`.
pub fn generate(spec: &PhantomSpec, out: &Path) -> Result<PhantomSummary> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let voxel_ml = spec.voxel_ml();
    let min_count = (spec.min_ml / voxel_ml).ceil() as usize;
    let max_count = (spec.max_ml / voxel_ml).floor() as usize;

    let n_cyst = spec.n_lesions.div_ceil(2);
    let labels: Vec<Label> = (0..spec.n_lesions)
        .map(|i| if i < n_cyst { Label::Cyst } else { Label::Metastasis })
        .collect();
    let sigma = spec.log_sigma;
    let dist = |mean: f64| LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("valid log-normal");
    let (cyst_dist, met_dist) = (dist(spec.cyst_mean_ml), dist(spec.metastasis_mean_ml));

    let mut planned = Vec::with_capacity(spec.n_lesions);
    for (i, &label) in labels.iter().enumerate() {
        let ml = match label {
            Label::Cyst => cyst_dist.sample(&mut rng),
            Label::Metastasis => met_dist.sample(&mut rng),
        }
        .clamp(spec.min_ml, spec.max_ml);
        let ratios = [0, 1, 2].map(|_| rng.random_range(0.75..1.3));
        let jitter = [0, 1, 2].map(|_| rng.random_range(-0.5..0.5));
        let target = ((ml / voxel_ml).round() as usize).clamp(min_count, max_count);
        let shape = fit_shape(target, min_count, max_count, ratios, jitter, spec.spacing);
        planned.push(Planned {
            lesion_id: i as u32 + 1,
            label,
            shape,
            seed: rng.random(),
        });
    }

    // random patient assignment, each patient getting at least one lesion
    let n_patients = spec.patients();
    let mut owner: Vec<usize> = (0..spec.n_lesions).map(|i| i % n_patients).collect();
    owner.shuffle(&mut rng);

    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut rows = Vec::with_capacity(spec.n_lesions);
    let mut lesions = Vec::with_capacity(spec.n_lesions);
    for patient in 0..n_patients {
        let members: Vec<&Planned> = planned.iter().zip(&owner).filter(|(_, &o)| o == patient).map(|(p, _)| p).collect();
        let patient_id = format!("P{patient:03}");
        let vm = render_patient(spec, &members, rng.random())?;
        let volume = vol_dir.join(format!("{patient_id}.json"));
        let mask = vol_dir.join(format!("{patient_id}_mask.json"));
        save_volume(&vm, &volume, &mask)?;
        for p in members {
            rows.push(ManifestRow {
                lesion_id: p.lesion_id,
                patient_id: patient_id.clone(),
                volume_path: PathBuf::from(format!("volumes/{patient_id}.json")),
                mask_path: PathBuf::from(format!("volumes/{patient_id}_mask.json")),
                label: p.label,
            });
            lesions.push(PhantomLesion {
                lesion_id: p.lesion_id,
                patient_id: patient_id.clone(),
                label: p.label,
                volume_ml: p.shape.voxels.len() as f64 * voxel_ml,
            });
        }
    }
    rows.sort_by_key(|r| r.lesion_id);
    lesions.sort_by_key(|l| l.lesion_id);
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(PhantomSummary { lesions, manifest })
}

fn render_patient(spec: &PhantomSpec, members: &[&Planned], seed: u64) -> Result<VolumeWithMask> {
    let m = spec.margin;
    let dims = [
        members.iter().map(|p| p.shape.extent[0] + m).sum::<usize>() + m,
        members.iter().map(|p| p.shape.extent[1]).max().unwrap_or(1) + 2 * m,
        members.iter().map(|p| p.shape.extent[2]).max().unwrap_or(1) + 2 * m,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let liver = Normal::new(spec.liver_hu, spec.liver_noise_hu.max(0.0)).expect("valid normal");
    let mut values: Vec<f64> = (0..dims.iter().product::<usize>()).map(|_| liver.sample(&mut rng)).collect();
    let mut mask = Grid::filled(dims, 0u16);
    let index = |p: [usize; 3]| p[0] + dims[0] * (p[1] + dims[1] * p[2]);

    let mut x0 = m;
    for lesion in members {
        let mut lrng = ChaCha8Rng::seed_from_u64(lesion.seed);
        let shape = &lesion.shape;
        let origin = [x0, m + (dims[1] - 2 * m - shape.extent[1]) / 2, m + (dims[2] - 2 * m - shape.extent[2]) / 2];
        let intensity: Vec<f64> = match lesion.label {
            Label::Cyst => {
                let noise = Normal::new(0.0, spec.cyst_noise_hu.max(0.0)).expect("valid normal");
                shape.voxels.iter().map(|_| spec.cyst_hu + noise.sample(&mut lrng)).collect()
            }
            Label::Metastasis => {
                let texture = blob_texture(shape, &mut lrng);
                let noise = Normal::new(0.0, 5.0).expect("valid normal");
                shape
                    .voxels
                    .iter()
                    .zip(texture)
                    .map(|((_, r), t)| {
                        let base = if *r > 0.75 {
                            spec.metastasis_rim_hu
                        } else {
                            spec.metastasis_core_hu + spec.metastasis_texture_hu * t
                        };
                        base + noise.sample(&mut lrng)
                    })
                    .collect()
            }
        };
        let id = u16::try_from(lesion.lesion_id).map_err(|_| Error::invalid("lesion id exceeds 65535"))?;
        for ((p, _), v) in shape.voxels.iter().zip(intensity) {
            let q = [origin[0] + p[0], origin[1] + p[1], origin[2] + p[2]];
            values[index(q)] = v;
            mask.set(q, id);
        }
        x0 += shape.extent[0] + m;
    }
    let intensities = Grid::new(dims, values.into_iter().map(hu).collect())?;
    VolumeWithMask::new(intensities, mask, spec.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_lesions, load_volume, read_manifest};
    use std::collections::BTreeMap;

    #[test]
    fn small_phantom_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            n_lesions: 10,
            seed: 2,
            ..PhantomSpec::default()
        };
        let summary = generate(&spec, dir.path()).unwrap();
        let rows = read_manifest(&summary.manifest).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.iter().filter(|r| r.label == Label::Cyst).count(), 5);
        let mut by_volume: BTreeMap<PathBuf, Vec<u32>> = BTreeMap::new();
        for r in &rows {
            by_volume.entry(r.volume_path.clone()).or_default().push(r.lesion_id);
        }
        for (path, ids) in by_volume {
            let mask = rows.iter().find(|r| r.volume_path == path).unwrap().mask_path.clone();
            let vm = load_volume(&path, &mask).unwrap();
            let found: Vec<u32> = extract_lesions(&vm).unwrap().iter().map(|l| l.lesion_id as u32).collect();
            assert_eq!(found, ids);
        }
        for l in &summary.lesions {
            assert!(l.volume_ml >= spec.min_ml && l.volume_ml <= spec.max_ml, "{l:?}");
        }
    }

    #[test]
    fn fit_shape_respects_bounds() {
        let spacing = [1.5, 1.5, 2.5];
        for target in [4, 10, 200, 5000] {
            let s = fit_shape(target, 4, 100_000, [1.0, 0.9, 1.2], [0.1, -0.2, 0.3], spacing);
            let n = s.voxels.len();
            assert!(n >= 4 && n.abs_diff(target) <= target / 5 + 6, "{target} -> {n}");
        }
    }
}
