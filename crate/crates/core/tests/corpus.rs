mod common;

use std::collections::BTreeSet;

use common::*;
use csat_core::corpus::{generate_synthetic, split_folds, SynthConfig};
use proptest::prelude::*;

#[test]
fn synthetic_corpus_shape() {
    let cfg = separated_config(3, 5, 1);
    let (ds, truth) = corpus(&cfg);
    assert_eq!(ds.n_speakers(), 15);
    assert_eq!(ds.n_frames(), 15 * cfg.utterances_per_speaker * cfg.frames_per_utterance);
    assert_eq!(ds.feature_dim(), cfg.feature_dim);
    assert_eq!(truth.len(), 15);
    for c in 0..3 {
        assert_eq!(truth.values().filter(|&&t| t == c).count(), 5);
    }
    let (_, targets) = ds.stacked();
    assert!(targets.iter().all(|&t| (t as usize) < cfg.n_classes));
}

#[test]
fn each_cluster_is_offset_by_one_shift_of_the_requested_norm() {
    let shifted = SynthConfig { cluster_shift_scale: 10.0, ..separated_config(2, 4, 2) };
    let flat = SynthConfig { cluster_shift_scale: 0.0, ..shifted.clone() };
    let (a, truth) = corpus(&shifted);
    let (b, _) = corpus(&flat);
    let mut shifts: Vec<Option<Vec<f64>>> = vec![None; 2];
    for (sa, sb) in a.speakers().iter().zip(b.speakers()) {
        let diff = sa.stacked_frames() - sb.stacked_frames();
        let first: Vec<f64> = diff.row(0).iter().copied().collect();
        let norm = first.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 10.0).abs() < 1e-9, "{norm}");
        for r in 0..diff.nrows() {
            for (j, v) in diff.row(r).iter().enumerate() {
                assert!((v - first[j]).abs() < 1e-9);
            }
        }
        let known = shifts[truth[&sa.id]].get_or_insert_with(|| first.clone());
        assert!(known.iter().zip(&first).all(|(x, y)| (x - y).abs() < 1e-9));
    }
    assert_ne!(shifts[0], shifts[1]);
}

#[test]
fn holdout_takes_speakers_from_every_cluster() {
    let (train, test, truth) = split(&separated_config(3, 6, 0), 2);
    assert_eq!(test.n_speakers(), 6);
    assert_eq!(train.n_speakers(), 12);
    for c in 0..3 {
        assert_eq!(test.speakers().iter().filter(|s| truth[&s.id] == c).count(), 2);
    }
    let (ds, truth) = corpus(&separated_config(2, 3, 0));
    assert!(csat_core::corpus::holdout_speakers(&ds, &truth, 3).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = separated_config(2, 3, 0);
    assert!(generate_synthetic(&SynthConfig { n_clusters_true: 0, ..base.clone() }).is_err());
    assert!(generate_synthetic(&SynthConfig { noise_scale: -1.0, ..base.clone() }).is_err());
    assert!(generate_synthetic(&SynthConfig { frames_per_utterance: 0, ..base }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folds_partition_the_speakers(n in 2usize..14, k in 2usize..8, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let cfg = SynthConfig {
            n_clusters_true: 1,
            speakers_per_cluster: n,
            utterances_per_speaker: 1,
            frames_per_utterance: 2,
            feature_dim: 2,
            n_classes: 2,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        let folds = split_folds(&ds, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = BTreeSet::new();
        for (train, val) in &folds {
            prop_assert_eq!(train.n_speakers() + val.n_speakers(), n);
            let t: BTreeSet<String> = train.speaker_ids().into_iter().collect();
            for id in val.speaker_ids() {
                prop_assert!(!t.contains(&id));
                prop_assert!(seen.insert(id));
            }
            prop_assert!(val.n_speakers() == n / k || val.n_speakers() == n.div_ceil(k));
        }
        prop_assert_eq!(seen.len(), n);
    }
}

#[test]
fn fold_split_rejects_degenerate_k() {
    let (ds, _) = corpus(&separated_config(1, 4, 0));
    assert!(split_folds(&ds, 1, 0).is_err());
    assert!(split_folds(&ds, 5, 0).is_err());
    assert_eq!(split_folds(&ds, 2, 7).unwrap(), split_folds(&ds, 2, 7).unwrap());
}
