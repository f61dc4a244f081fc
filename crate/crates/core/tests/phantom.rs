use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use hepalesion::data::{extract_lesions, load_volume, read_manifest, Label};
use hepalesion::phantom::{generate, PhantomSpec};

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_phantom_matches_population_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::default();
    let summary = generate(&spec, dir.path()).unwrap();
    let rows = read_manifest(&summary.manifest).unwrap();
    assert_eq!(rows.len(), 230);
    assert_eq!(rows.iter().filter(|r| r.label == Label::Cyst).count(), 115);
    assert_eq!(rows.iter().filter(|r| r.label == Label::Metastasis).count(), 115);

    let mets: Vec<f64> = summary.lesions.iter().filter(|l| l.label == Label::Metastasis).map(|l| l.volume_ml).collect();
    let mean = mets.iter().sum::<f64>() / mets.len() as f64;
    assert!((mean - 24.871).abs() / 24.871 < 0.3, "mean metastasis volume {mean}");
    assert!(summary.lesions.iter().all(|l| (spec.min_ml..=spec.max_ml).contains(&l.volume_ml)));

    // every mask id is listed once and has voxels; texture variance separates classes
    let mut seen = BTreeSet::new();
    let (mut var_cyst, mut var_met) = (Vec::new(), Vec::new());
    let volumes: BTreeSet<_> = rows.iter().map(|r| (r.volume_path.clone(), r.mask_path.clone())).collect();
    for (v, m) in volumes {
        let vm = load_volume(&v, &m).unwrap();
        for lesion in extract_lesions(&vm).unwrap() {
            assert!(lesion.voxel_count >= 1);
            let id = lesion.lesion_id as u32;
            assert!(seen.insert(id), "lesion {id} appears twice");
            let row = rows.iter().find(|r| r.lesion_id == id).expect("mask id in manifest");
            let vals: Vec<f64> = vm
                .mask
                .data
                .iter()
                .zip(&vm.intensities.data)
                .filter(|(&k, _)| k as u32 == id)
                .map(|(_, &h)| h as f64)
                .collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            match row.label {
                Label::Cyst => var_cyst.push(var),
                Label::Metastasis => var_met.push(var),
            }
        }
    }
    assert_eq!(seen.len(), 230);
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&var_met) > avg(&var_cyst), "{} vs {}", avg(&var_met), avg(&var_cyst));
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = PhantomSpec {
        n_lesions: 24,
        seed: 7,
        ..PhantomSpec::default()
    };
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate(&PhantomSpec { seed: 8, ..spec }, c.path()).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn odd_counts_stay_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate(&PhantomSpec { n_lesions: 11, ..PhantomSpec::default() }, dir.path()).unwrap();
    let cysts = summary.lesions.iter().filter(|l| l.label == Label::Cyst).count();
    assert!(cysts.abs_diff(11 - cysts) <= 1);
}

#[test]
fn unwritable_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("blocker");
    fs::write(&file, b"x").unwrap();
    assert!(generate(&PhantomSpec { n_lesions: 4, ..PhantomSpec::default() }, &file.join("sub")).is_err());
}
