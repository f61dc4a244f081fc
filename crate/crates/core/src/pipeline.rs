//! End-to-end stages over directories: prepare, train, evaluate, predict.
//!
//! ```text
//! data/manifest.csv --prepare--> prep/{patches.bin, split.json}
//! prep --train--> run/{best.ckpt, log.csv, config.json}
//! run/best.ckpt + prep --eval--> report/{report.json, metrics.csv, roc.csv}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    extract_lesions, extract_patch_triplet, load_volume, make_split, read_manifest, Label, LesionMeta, ManifestRow,
    PatchArchive, PatchTriplet, SplitItem, SplitManifest, TripletPlanes,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_set, render_overlay, write_report, EvalReport};
use crate::model::{build_model, load_checkpoint, read_checkpoint, write_checkpoint, Model};
use crate::train::{train, write_log, TrainOptions, TrainOutcome};

pub const ARCHIVE_FILE: &str = "patches.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn triplets_for(rows: &[&ManifestRow], target: (usize, usize), planes: TripletPlanes) -> Result<Vec<(LesionMeta, PatchTriplet)>> {
    let first = rows[0];
    let vm = load_volume(&first.volume_path, &first.mask_path).map_err(|e| e.in_file(&first.volume_path))?;
    let extents = extract_lesions(&vm).map_err(|e| e.in_file(&first.mask_path))?;
    rows.iter()
        .map(|row| {
            let lesion = extents.iter().find(|l| l.lesion_id as u32 == row.lesion_id).ok_or_else(|| {
                Error::Format(format!("lesion {} has no voxels in {}", row.lesion_id, row.mask_path.display()))
            })?;
            let triplet = extract_patch_triplet(&vm, lesion, row.lesion_id, row.label, target, planes)?;
            let meta = LesionMeta {
                lesion_id: row.lesion_id,
                patient_id: row.patient_id.clone(),
                label: row.label,
                volume_ml: lesion.volume_ml,
            };
            Ok((meta, triplet))
        })
        .collect()
}

pub struct Prepared {
    pub archive: PatchArchive,
    pub split: SplitManifest,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let archive = PatchArchive::load(&dir.join(ARCHIVE_FILE))?;
        let path = dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let split: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&path))?;
        Ok(Self { archive, split })
    }

    fn subset(&self, ids: &[u32]) -> Result<Vec<PatchTriplet>> {
        ids.iter()
            .map(|&id| {
                self.archive
                    .position(id)
                    .map(|i| self.archive.triplets[i].clone())
                    .ok_or_else(|| Error::Format(format!("split lists lesion {id}, which is not in the archive")))
            })
            .collect()
    }

    pub fn train_set(&self) -> Result<Vec<PatchTriplet>> {
        self.subset(&self.split.train)
    }

    pub fn val_set(&self) -> Result<Vec<PatchTriplet>> {
        self.subset(&self.split.val)
    }

    pub fn test_set(&self) -> Result<Vec<PatchTriplet>> {
        self.subset(&self.split.test)
    }
}

/// Extracts normalized patch triplets for every manifest row, splits them and
/// writes the archive and split manifest into `out`.
pub fn prepare(data_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<Prepared> {
    cfg.validate()?;
    let manifest = data_dir.join(&cfg.data.manifest);
    let rows = read_manifest(&manifest)?;
    let mut seen = BTreeSet::new();
    if let Some(r) = rows.iter().find(|r| !seen.insert(r.lesion_id)) {
        return Err(Error::Format(format!("{}: lesion id {} listed twice", manifest.display(), r.lesion_id)));
    }
    let mut by_volume: BTreeMap<(PathBuf, PathBuf), Vec<&ManifestRow>> = BTreeMap::new();
    for r in &rows {
        by_volume.entry((r.volume_path.clone(), r.mask_path.clone())).or_default().push(r);
    }
    let groups: Vec<Vec<&ManifestRow>> = by_volume.into_values().collect();
    let target = cfg.model.patch_size;
    let per_volume: Vec<Vec<(LesionMeta, PatchTriplet)>> =
        groups.par_iter().map(|g| triplets_for(g, target, cfg.model.triplet_planes)).collect::<Result<_>>()?;
    let mut all: Vec<(LesionMeta, PatchTriplet)> = per_volume.into_iter().flatten().collect();
    all.sort_by_key(|(m, _)| m.lesion_id);
    let (lesions, triplets): (Vec<_>, Vec<_>) = all.into_iter().unzip();

    let items: Vec<SplitItem> = lesions
        .iter()
        .map(|m| SplitItem {
            lesion_id: m.lesion_id,
            patient_id: m.patient_id.clone(),
            label: m.label,
        })
        .collect();
    let split = make_split(&items, cfg.seed, cfg.data.split_strategy)?;
    let archive = PatchArchive::new(target.0, target.1, lesions, triplets)?;

    create_dir(out)?;
    archive.save(&out.join(ARCHIVE_FILE))?;
    write_text(&out.join(SPLIT_FILE), &serde_json::to_string_pretty(&split)?)?;
    Ok(Prepared { archive, split })
}

/// Trains on a prepared directory, writing the best checkpoint, the epoch log
/// and the resolved config into `out`.
pub fn train_run(prepared: &Path, cfg: &RunConfig, out: &Path, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Prepared::load(prepared)?;
    let (train_set, val_set) = (data.train_set()?, data.val_set()?);
    let mut model = build_model(&cfg.model, cfg.seed)?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json()?)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    opts.checkpoint_path = Some(ckpt.clone());
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, opts)?;
    write_checkpoint(&outcome.best, &ckpt)?;
    write_log(&out.join(LOG_FILE), &outcome.log)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on the test split of a prepared directory.
pub fn eval_run(checkpoint: &Path, prepared: &Path, out: &Path) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = Prepared::load(prepared)?;
    let report = evaluate(&model, &data.test_set()?)?;
    write_report(&report, out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionProbability {
    pub lesion_id: u32,
    pub predicted: Label,
    pub prob_cyst: f64,
    pub prob_metastasis: f64,
}

/// Classifies every lesion of one volume. Writes `predictions.json` and one
/// overlay per axial slice through a lesion centre (`overlay_z<z>.ppm`).
pub fn predict_run(checkpoint: &Path, volume: &Path, mask: &Path, out: &Path) -> Result<Vec<LesionProbability>> {
    let model: Model = read_checkpoint(checkpoint)?.to_model()?;
    let vm = load_volume(volume, mask).map_err(|e| e.in_file(volume))?;
    let lesions = extract_lesions(&vm).map_err(|e| e.in_file(mask))?;
    let (target, planes) = (model.config().patch_size, model.config().triplet_planes);
    // the label is unknown here; the placeholder never reaches the output
    let triplets: Vec<PatchTriplet> = lesions
        .iter()
        .map(|l| extract_patch_triplet(&vm, l, l.lesion_id as u32, Label::Cyst, target, planes))
        .collect::<Result<_>>()?;
    let probs = predict_set(&model, &triplets.iter().collect::<Vec<_>>())?;
    let results: Vec<LesionProbability> = lesions
        .iter()
        .zip(probs)
        .map(|(l, p)| LesionProbability {
            lesion_id: l.lesion_id as u32,
            predicted: if p > 0.5 { Label::Metastasis } else { Label::Cyst },
            prob_cyst: 1.0 - p,
            prob_metastasis: p,
        })
        .collect();

    create_dir(out)?;
    write_text(&out.join(PREDICTIONS_FILE), &serde_json::to_string_pretty(&results)?)?;
    let labels: BTreeMap<u32, Label> = results.iter().map(|r| (r.lesion_id, r.predicted)).collect();
    let slices: BTreeSet<usize> = lesions.iter().map(|l| (l.bbox.min[2] + l.bbox.max[2]) / 2).collect();
    for z in slices {
        render_overlay(&vm, &labels, z)?.write_ppm(&out.join(format!("overlay_z{z:03}.ppm")))?;
    }
    Ok(results)
}
