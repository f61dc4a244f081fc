use std::collections::{BTreeMap, BTreeSet};

use hepalesion::data::{
    crop_pad, epoch_order, make_split, normalize, split_sizes, stream_batches, AugmentConfig, Label, LoaderConfig,
    Patch, PatchTriplet, SplitItem, SplitStrategy,
};
use hepalesion::eval::{compute_metrics, roc_auc, Confusion};
use hepalesion::model::{build_model, ModelConfig};
use hepalesion::tensor::Tensor;
use proptest::prelude::*;

fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u8..6).prop_map(|k| k as f64 / 5.0), 0.0f64..1.0], n),
            prop::collection::vec(0usize..2, n - 2),
        )
            .prop_map(|(s, mut l)| {
                l.extend([0, 1]);
                (s, l)
            })
    })
}

fn split_items() -> impl Strategy<Value = Vec<SplitItem>> {
    (5usize..250, 1usize..40).prop_flat_map(|(n, patients)| {
        prop::collection::vec((0..patients, prop::bool::ANY), n).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (p, met))| SplitItem {
                    lesion_id: i as u32 + 1,
                    patient_id: format!("P{p}"),
                    label: if met { Label::Metastasis } else { Label::Cyst },
                })
                .collect()
        })
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_width: 8,
        head_width: 8,
        input_size: (12, 12),
        width_multiplier: 0.25,
        stem_channels: 8,
        stem_strides: (1, 1),
        factorized_kernel: 3,
        aux_channels: 4,
        ..ModelConfig::default()
    }
}

proptest! {
    #[test]
    fn trapezoid_auc_matches_pairwise_statistic((scores, labels) in scored_labels()) {
        let (points, auc) = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
        prop_assert!(points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        let last = points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn metrics_follow_their_definitions(tp in 0u64..50, fn_ in 0u64..50, fp in 0u64..50, tn in 0u64..50) {
        prop_assume!(tp + fn_ + fp + tn > 0);
        let m = compute_metrics(&Confusion::from_counts(tp, fn_, fp, tn)).unwrap();
        prop_assert!((m.balanced_accuracy - (m.recall + m.specificity) / 2.0).abs() < 1e-12);
        prop_assert!((m.accuracy - (tp + tn) as f64 / (tp + fn_ + fp + tn) as f64).abs() < 1e-12);
        for v in [m.accuracy, m.balanced_accuracy, m.f1, m.precision, m.recall, m.specificity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.undefined.contains(&"precision".to_string()), tp + fp == 0);
    }

    #[test]
    fn lesion_split_partitions_and_repeats(items in split_items(), seed in any::<u64>()) {
        let s = make_split(&items, seed, SplitStrategy::LesionLevel).unwrap();
        let (tr, va, te) = split_sizes(items.len());
        prop_assert_eq!((s.train.len(), s.val.len(), s.test.len()), (tr, va, te));
        let all: BTreeSet<u32> = s.all().collect();
        prop_assert_eq!(all.len(), items.len());
        prop_assert_eq!(make_split(&items, seed, SplitStrategy::LesionLevel).unwrap(), s);
    }

    #[test]
    fn patient_split_keeps_patients_together(items in split_items(), seed in any::<u64>()) {
        let s = make_split(&items, seed, SplitStrategy::PatientLevel).unwrap();
        let patient: BTreeMap<u32, &str> = items.iter().map(|i| (i.lesion_id, i.patient_id.as_str())).collect();
        let groups = [&s.train, &s.val, &s.test].map(|ids| ids.iter().map(|id| patient[id]).collect::<BTreeSet<_>>());
        prop_assert!(groups[0].is_disjoint(&groups[1]) && groups[0].is_disjoint(&groups[2]) && groups[1].is_disjoint(&groups[2]));
        prop_assert_eq!(s.all().count(), items.len());
    }

    #[test]
    fn crop_pad_keeps_the_interior(rows in 1usize..30, cols in 1usize..30, tr in 1usize..40, tc in 1usize..40, seed in any::<u32>()) {
        let data: Vec<f32> = (0..rows * cols).map(|i| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / u32::MAX as f32).collect();
        let p = Patch::new(rows, cols, data).unwrap();
        let out = crop_pad(&p, (tr, tc));
        prop_assert_eq!(out.size(), (tr, tc));
        let (nr, nc) = (rows.min(tr), cols.min(tc));
        let (sr, dr) = if rows >= tr { ((rows - tr) / 2, 0) } else { (0, (tr - rows) / 2) };
        let (sc, dc) = if cols >= tc { ((cols - tc) / 2, 0) } else { (0, (tc - cols) / 2) };
        for r in 0..nr {
            for c in 0..nc {
                prop_assert_eq!(out.at(dr + r, dc + c), p.at(sr + r, sc + c));
            }
        }
        if rows < tr {
            prop_assert!((out.at(0, 0) as f64 - p.mean()).abs() < 1e-5 || dr == 0);
        }
    }

    #[test]
    fn normalized_patches_are_standardized(values in prop::collection::vec(-500.0f32..500.0, 4..200)) {
        let p = Patch::new(1, values.len(), values).unwrap();
        let n = normalize(&p);
        prop_assert!(n.mean().abs() < 1e-4);
        if p.std() > 1e-3 {
            prop_assert!((n.std() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..300, seed in any::<u64>(), epoch in 0usize..100) {
        let mut o = epoch_order(n, seed, epoch);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predicted_rows_sum_to_one(seed in any::<u64>(), values in prop::collection::vec(-3.0f32..3.0, 2 * 3 * 144)) {
        let model = build_model(&tiny_model(), seed).unwrap();
        let probs = model.predict(&Tensor::new(vec![2, 3, 12, 12], values).unwrap()).unwrap();
        for row in probs.data().chunks(2) {
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn batch_stream_ignores_worker_count(seed in any::<u64>(), workers in 2usize..6) {
        let set: Vec<PatchTriplet> = (0..21)
            .map(|i| PatchTriplet {
                lesion_id: i + 1,
                label: if i % 2 == 0 { Label::Cyst } else { Label::Metastasis },
                rows: 10,
                cols: 9,
                data: (0..270).map(|k| ((k * (i as usize + 3)) % 11) as f32).collect(),
            })
            .collect();
        let order = epoch_order(set.len(), seed, 1);
        let collect = |workers| {
            let cfg = LoaderConfig {
                batch_size: 4,
                input_size: (8, 8),
                augment: AugmentConfig::default(),
                workers,
                drop_last: true,
            };
            let mut out = Vec::new();
            stream_batches(&set, &order, &cfg, seed, 1, |b| {
                out.push((b.lesion_ids, b.inputs.data().to_vec()));
                Ok(())
            })
            .unwrap();
            out
        };
        prop_assert_eq!(collect(1), collect(workers));
    }
}
