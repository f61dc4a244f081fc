use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lesion::Label;
use crate::error::{Error, Result};

pub const MIN_RECORDS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    LesionLevel,
    PatientLevel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub lesion_id: u32,
    pub patient_id: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub strategy: SplitStrategy,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Target sizes `(train, val, test)` for 60/20/20.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = (0.2 * n as f64).round() as usize;
    (train, val, n - train - val)
}

/// Merges per-group queues so every prefix holds each group in proportion
/// to its size (within one element). `weight` gives each item's size.
fn interleave<T>(groups: Vec<Vec<T>>, weight: impl Fn(&T) -> usize) -> Vec<T> {
    let totals: Vec<usize> = groups.iter().map(|g| g.iter().map(&weight).sum()).collect();
    let mut taken = vec![0usize; groups.len()];
    let mut queues: Vec<std::collections::VecDeque<T>> = groups.into_iter().map(Into::into).collect();
    let mut out = Vec::new();
    loop {
        let next = (0..queues.len())
            .filter(|&g| !queues[g].is_empty())
            .min_by(|&a, &b| {
                let fa = (taken[a] as f64 + 0.5) / totals[a] as f64;
                let fb = (taken[b] as f64 + 0.5) / totals[b] as f64;
                fa.total_cmp(&fb).then(a.cmp(&b))
            });
        let Some(g) = next else { break };
        let item = queues[g].pop_front().expect("non-empty");
        taken[g] += weight(&item);
        out.push(item);
    }
    out
}

/// Seeded 60/20/20 split stratified by label.
///
/// `PatientLevel` keeps each patient's lesions together; sizes and class
/// balance then follow the patient groups as closely as they allow.
pub fn make_split(items: &[SplitItem], seed: u64, strategy: SplitStrategy) -> Result<SplitManifest> {
    if items.len() < MIN_RECORDS {
        return Err(Error::invalid(format!(
            "need at least {MIN_RECORDS} lesions to split, got {}",
            items.len()
        )));
    }
    let mut ids = BTreeSet::new();
    for it in items {
        if !ids.insert(it.lesion_id) {
            return Err(Error::invalid(format!("duplicate lesion id {}", it.lesion_id)));
        }
    }
    let mut sorted = items.to_vec();
    sorted.sort_by_key(|it| it.lesion_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_val, _) = split_sizes(items.len());

    let (mut train, mut val, mut test) = match strategy {
        SplitStrategy::LesionLevel => {
            let mut by_label: BTreeMap<Label, Vec<u32>> = BTreeMap::new();
            for it in &sorted {
                by_label.entry(it.label).or_default().push(it.lesion_id);
            }
            let groups: Vec<Vec<u32>> = by_label
                .into_values()
                .map(|mut g| {
                    g.shuffle(&mut rng);
                    g
                })
                .collect();
            let order = interleave(groups, |_| 1);
            (
                order[..n_train].to_vec(),
                order[n_train..n_train + n_val].to_vec(),
                order[n_train + n_val..].to_vec(),
            )
        }
        SplitStrategy::PatientLevel => {
            let mut patients: BTreeMap<&str, Vec<&SplitItem>> = BTreeMap::new();
            for it in &sorted {
                patients.entry(it.patient_id.as_str()).or_default().push(it);
            }
            // group patients by majority label
            let mut by_label: BTreeMap<Label, Vec<Vec<u32>>> = BTreeMap::new();
            for lesions in patients.into_values() {
                let mets = lesions.iter().filter(|l| l.label == Label::Metastasis).count();
                let label = if 2 * mets > lesions.len() { Label::Metastasis } else { Label::Cyst };
                by_label
                    .entry(label)
                    .or_default()
                    .push(lesions.iter().map(|l| l.lesion_id).collect());
            }
            let groups: Vec<Vec<Vec<u32>>> = by_label
                .into_values()
                .map(|mut g| {
                    g.shuffle(&mut rng);
                    g
                })
                .collect();
            let order = interleave(groups, Vec::len);
            let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
            let mut cum = 0usize;
            for patient in order {
                let mid = cum + patient.len() / 2;
                let dest = if mid < n_train {
                    &mut train
                } else if mid < n_train + n_val {
                    &mut val
                } else {
                    &mut test
                };
                cum += patient.len();
                dest.extend(patient);
            }
            (train, val, test)
        }
    };
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest {
        seed,
        strategy,
        train,
        val,
        test,
    })
}

impl SplitManifest {
    pub fn all(&self) -> impl Iterator<Item = u32> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }
}
