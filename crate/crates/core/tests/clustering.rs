mod common;

use std::collections::BTreeMap;

use common::*;
use csat_core::clustering::{
    cluster_stats, match_cluster, mean_member_embeddings, squared_distance, ward_cluster, Clustering,
    ClusterStats,
};
use csat_core::embedding::{similarity, SpeakerEmbedding};
use csat_core::nalgebra::DVector;
use csat_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

fn assert_matches_oracle(embs: &BTreeMap<String, SpeakerEmbedding>, label: &str) {
    let expected = ward_oracle(embs);
    let got = ward_cluster(embs, 1).unwrap();
    let got = got.dendrogram();
    assert_eq!(got.len(), expected.len(), "{label}");
    for (step, (m, &(left, right, size, cost))) in got.iter().zip(&expected).enumerate() {
        assert_eq!((m.left, m.right, m.size), (left, right, size), "{label} step {step}");
        assert!((m.cost - cost).abs() <= 1e-9, "{label} step {step}: {} vs {cost}", m.cost);
    }
}

#[test]
fn lance_williams_merges_equal_the_recomputation_oracle() {
    for seed in 0..25u64 {
        for n in 2..=8 {
            let d = rng(seed).random_range(2..6);
            assert_matches_oracle(&random_embeddings(seed * 31 + n as u64, n, d), &format!("seed {seed} n {n}"));
        }
    }
}

#[test]
fn oracle_agreement_with_exact_ties() {
    // Repeated vectors give many zero-cost ties.
    let mut r = rng(4);
    let base: Vec<SpeakerEmbedding> = (0..3).map(|_| unit_embedding(&mut r, 3)).collect();
    let embs: BTreeMap<String, SpeakerEmbedding> =
        (0..8).map(|i| (format!("s{i}"), base[i % 3].clone())).collect();
    assert_matches_oracle(&embs, "ties");
}

#[test]
fn merge_costs_never_decrease() {
    for seed in 0..20 {
        let embs = random_embeddings(seed, 12, 4);
        let c = ward_cluster(&embs, 1).unwrap();
        for w in c.dendrogram().windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-12, "seed {seed}: {:?}", w);
        }
    }
}

#[test]
fn labels_do_not_depend_on_insertion_order() {
    let embs = random_embeddings(8, 10, 5);
    let reference = ward_cluster(&embs, 3).unwrap();
    let mut pairs: Vec<_> = embs.into_iter().collect();
    for seed in 0..5 {
        pairs.shuffle(&mut rng(seed));
        let shuffled: BTreeMap<_, _> = pairs.iter().cloned().collect();
        assert_eq!(ward_cluster(&shuffled, 3).unwrap(), reference);
    }
}

#[test]
fn cutting_the_tree_gives_k_clusters_ordered_by_first_member() {
    let embs = random_embeddings(2, 9, 3);
    for k in 1..=9 {
        let c = ward_cluster(&embs, k).unwrap();
        assert_eq!(c.k(), k);
        assert_eq!(c.sizes().iter().sum::<usize>(), 9);
        let firsts: Vec<usize> = (0..k)
            .map(|cl| c.labels().iter().position(|&l| l == cl).unwrap())
            .collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]), "k {k}: {firsts:?}");
    }
}

#[test]
fn too_many_clusters_is_an_argument_error() {
    let embs = random_embeddings(0, 3, 3);
    match ward_cluster(&embs, 5) {
        Err(Error::Argument(msg)) => {
            assert!(msg.contains("k = 5") && msg.contains('3'), "{msg}");
        }
        other => panic!("expected an argument error, got {other:?}"),
    }
    assert!(ward_cluster(&embs, 0).is_err());
}

#[test]
fn squared_distance_matches_similarity() {
    let embs = random_embeddings(5, 6, 7);
    let v: Vec<_> = embs.values().collect();
    for a in &v {
        for b in &v {
            let direct = (a.vector() - b.vector()).norm_squared();
            assert!((squared_distance(a, b) - direct).abs() < 1e-12);
            assert!((squared_distance(a, b) - (2.0 - 2.0 * similarity(a, b))).abs() < 1e-12);
        }
    }
}

/// Sizes that split 277 speakers into `k` nonempty clusters.
fn partition(total: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut sizes = vec![1; k];
    for _ in 0..total - k {
        sizes[r.random_range(0..k)] += 1;
    }
    sizes
}

#[test]
fn cluster_size_statistics_for_277_speakers() {
    for (k, expected) in [(5, 55.4), (10, 27.7), (20, 13.9)] {
        for seed in 0..5 {
            let sizes = partition(277, k, seed);
            let ids: Vec<String> = (0..277).map(|i| format!("spk{i:03}")).collect();
            let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| vec![c; s]).collect();
            let clustering = Clustering::new(k, ids, labels, Vec::new()).unwrap();
            let stats = cluster_stats(&clustering);
            // 277 / 20 = 13.85 sits exactly on the inclusive boundary.
            assert!((stats.avg_size - expected).abs() <= 0.05 + 1e-9, "k {k}: {}", stats.avg_size);
            assert_eq!(stats.min_size, *sizes.iter().min().unwrap());
            assert_eq!(stats.max_size, *sizes.iter().max().unwrap());
        }
    }
    let s = ClusterStats::from_sizes(&[3, 1, 2]);
    assert_eq!((s.min_size, s.max_size, s.avg_size), (1, 3, 2.0));
}

#[test]
fn matching_picks_the_most_similar_cluster() {
    let e = |v: &[f64]| SpeakerEmbedding::from_raw(DVector::from_row_slice(v), 1).unwrap();
    let embs: BTreeMap<String, SpeakerEmbedding> = [
        ("a", e(&[1.0, 0.0])),
        ("b", e(&[0.9, 0.1])),
        ("c", e(&[0.0, 1.0])),
        ("d", e(&[0.1, 0.9])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let c = mean_member_embeddings(ward_cluster(&embs, 2).unwrap(), &embs).unwrap();
    assert_eq!(c.labels(), &[0, 0, 1, 1]);
    assert_eq!(match_cluster(&e(&[1.0, 0.2]), &c).unwrap(), 0);
    assert_eq!(match_cluster(&e(&[0.2, 1.0]), &c).unwrap(), 1);
    // Equidistant: lowest index wins.
    let tie = Clustering::new(2, vec!["a".into(), "b".into()], vec![0, 1], Vec::new())
        .unwrap()
        .with_embeddings(vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])])
        .unwrap();
    assert_eq!(match_cluster(&e(&[1.0, 1.0]), &tie).unwrap(), 0);
    assert!(match_cluster(&e(&[1.0, 0.0, 0.0]), &tie).is_err());
}
