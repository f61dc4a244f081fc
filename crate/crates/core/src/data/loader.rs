use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_triplet, AugmentConfig};
use super::patch::{resize_bilinear, PatchTriplet};
use crate::error::Result;
use crate::tensor::Tensor;

pub struct Batch {
    /// `[B, 3, H, W]`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub lesion_ids: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub input_size: (usize, usize),
    pub augment: AugmentConfig,
    pub workers: usize,
    pub drop_last: bool,
}

/// SplitMix64 finalizer over a combined key; used to derive per-epoch and
/// per-sample RNG seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
    order
}

/// Resizes each patch to `size` and stacks them as 3 channels.
pub fn triplet_input(t: &PatchTriplet, size: (usize, usize)) -> Vec<f32> {
    t.patches()
        .iter()
        .flat_map(|p| resize_bilinear(p, size.0, size.1).data)
        .collect()
}

pub fn make_batch(triplets: &[&PatchTriplet], size: (usize, usize)) -> Result<Batch> {
    let mut data = Vec::with_capacity(triplets.len() * 3 * size.0 * size.1);
    for t in triplets {
        data.extend(triplet_input(t, size));
    }
    Ok(Batch {
        inputs: Tensor::new(vec![triplets.len(), 3, size.0, size.1], data)?,
        labels: triplets.iter().map(|t| t.label.index()).collect(),
        lesion_ids: triplets.iter().map(|t| t.lesion_id).collect(),
    })
}

/// Splits `order` into batches (dropping a trailing partial batch when asked).
pub fn batch_indices(order: &[usize], batch_size: usize, drop_last: bool) -> Vec<&[usize]> {
    order
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .collect()
}

fn build(triplets: &[PatchTriplet], idx: &[usize], cfg: &LoaderConfig, seed: u64, epoch: usize) -> Result<Batch> {
    let augmented: Vec<PatchTriplet> = idx
        .iter()
        .map(|&i| {
            let t = &triplets[i];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, t.lesion_id as u64]));
            augment_triplet(t, &cfg.augment.draw(&mut rng))
        })
        .collect();
    make_batch(&augmented.iter().collect::<Vec<_>>(), cfg.input_size)
}

/// Produces the epoch's batches in schedule order and hands each to `sink`.
///
/// With more than one worker, batches are built on worker threads and pass
/// through a bounded channel; each sample's augmentation depends only on
/// `(seed, epoch, lesion_id)`, so the stream is identical for any worker count.
pub fn stream_batches(
    triplets: &[PatchTriplet],
    order: &[usize],
    cfg: &LoaderConfig,
    seed: u64,
    epoch: usize,
    mut sink: impl FnMut(Batch) -> Result<()>,
) -> Result<()> {
    let batches = batch_indices(order, cfg.batch_size, cfg.drop_last);
    if cfg.workers <= 1 || batches.len() <= 1 {
        for idx in batches {
            sink(build(triplets, idx, cfg, seed, epoch)?)?;
        }
        return Ok(());
    }
    let workers = cfg.workers.min(batches.len());
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Result<Batch>)>(2 * workers);
        for w in 0..workers {
            let tx = tx.clone();
            let batches = &batches;
            s.spawn(move || {
                for b in (w..batches.len()).step_by(workers) {
                    if tx.send((b, build(triplets, batches[b], cfg, seed, epoch))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        // rx is dropped on return, which stops the workers early on error
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (b, batch) in rx {
            pending.insert(b, batch);
            while let Some(batch) = pending.remove(&next) {
                sink(batch?)?;
                next += 1;
            }
        }
        Ok(())
    })
}
