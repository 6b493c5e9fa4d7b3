//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use csat_core::corpus::{generate_synthetic, holdout_speakers, Dataset, SynthConfig, TrueAssignment};
use csat_core::embedding::SpeakerEmbedding;
use csat_core::nalgebra::{DMatrix, DVector};
use csat_core::network::{Activation, LayerParams, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn unit_embedding(rng: &mut ChaCha8Rng, d: usize) -> SpeakerEmbedding {
    let v = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    SpeakerEmbedding::from_raw(v, 1).unwrap()
}

pub fn random_embeddings(seed: u64, n: usize, d: usize) -> BTreeMap<String, SpeakerEmbedding> {
    let mut r = rng(seed);
    (0..n).map(|i| (format!("s{i:02}"), unit_embedding(&mut r, d))).collect()
}

/// A network with Gaussian weights and biases (scaled by `scale`).
pub fn random_network(spec: NetworkSpec, seed: u64, scale: f64) -> Network {
    let mut r = rng(seed);
    let layers = spec
        .layer_dims
        .iter()
        .map(|&(i, o)| LayerParams {
            weight: gaussian_matrix(&mut r, o, i) * scale,
            bias: DVector::from_fn(o, |_, _| r.sample::<f64, _>(StandardNormal) * scale),
        })
        .collect();
    Network::new(spec, layers).unwrap()
}

pub fn small_spec(activation: Activation) -> NetworkSpec {
    let hidden = match activation {
        Activation::Pnorm { group_size, .. } => 3 * group_size,
        _ => 5,
    };
    NetworkSpec::stacked(4, 3, hidden, activation, 3).unwrap()
}

pub fn random_targets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..classes as u32)).collect()
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `eps`, over every parameter of every layer.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn max_gradient_error(net: &Network, batch: &DMatrix<f64>, targets: &[u32], eps: f64) -> f64 {
    let freeze = vec![false; net.n_layers()];
    let (_, grads) = net.loss_and_grad(batch, targets, &freeze).unwrap();
    let loss = |layers: Vec<LayerParams>| {
        let n = Network::new(net.spec().clone(), layers).unwrap();
        n.loss_and_grad(batch, targets, &freeze).unwrap().0
    };
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for l in 0..net.n_layers() {
        let p = net.layer(l);
        for idx in 0..p.weight.len() {
            let mut plus = net.layers().to_vec();
            let mut minus = net.layers().to_vec();
            plus[l].weight[idx] += eps;
            minus[l].weight[idx] -= eps;
            check(grads.layers[l].weight[idx], (loss(plus) - loss(minus)) / (2.0 * eps));
        }
        for idx in 0..p.bias.len() {
            let mut plus = net.layers().to_vec();
            let mut minus = net.layers().to_vec();
            plus[l].bias[idx] += eps;
            minus[l].bias[idx] -= eps;
            check(grads.layers[l].bias[idx], (loss(plus) - loss(minus)) / (2.0 * eps));
        }
    }
    worst
}

/// One merge as recorded by the oracle: `(left node, right node, size, cost)`.
pub type OracleMerge = (usize, usize, usize, f64);

/// Ward clustering recomputed from scratch at every step.
///
/// The cost of merging `A` and `B` is `SSE(A ∪ B) - SSE(A) - SSE(B)` with
/// `SSE(S) = sum_{x,y in S} d²(x,y) / (2|S|)` and `d² = 2 - 2<a,b>`. No
/// recurrence is used. Ties go to the pair whose smallest members sort first.
pub fn ward_oracle(embs: &BTreeMap<String, SpeakerEmbedding>) -> Vec<OracleMerge> {
    let v: Vec<&SpeakerEmbedding> = embs.values().collect();
    let n = v.len();
    let d2 = |i: usize, j: usize| 2.0 - 2.0 * v[i].vector().dot(v[j].vector());
    let sse = |s: &[usize]| {
        let mut t = 0.0;
        for &a in s {
            for &b in s {
                if a != b {
                    t += d2(a, b);
                }
            }
        }
        t / (2.0 * s.len() as f64)
    };
    let mut clusters: Vec<(Vec<usize>, usize)> = (0..n).map(|i| (vec![i], i)).collect();
    let mut merges = Vec::new();
    for step in 0..n.saturating_sub(1) {
        clusters.sort_by_key(|(m, _)| *m.iter().min().unwrap());
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut u = clusters[a].0.clone();
                u.extend(&clusters[b].0);
                let cost = sse(&u) - sse(&clusters[a].0) - sse(&clusters[b].0);
                if best.is_none_or(|(_, _, c)| cost < c) {
                    best = Some((a, b, cost));
                }
            }
        }
        let (a, b, cost) = best.unwrap();
        let (mb, nb) = clusters.remove(b);
        let (ma, na) = clusters[a].clone();
        let mut members = ma;
        members.extend(mb);
        merges.push((na, nb, members.len(), cost));
        clusters[a] = (members, n + step);
    }
    merges
}

/// Well-separated corpus: UBM components are shared across clusters because
/// the shift is smaller than the class-mean spread but far above the noise.
pub fn separated_config(n_clusters: usize, speakers_per_cluster: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_clusters_true: n_clusters,
        speakers_per_cluster,
        cluster_shift_scale: 3.0,
        noise_scale: 0.5,
        seed,
        ..SynthConfig::default()
    }
}

pub fn corpus(cfg: &SynthConfig) -> (Dataset, TrueAssignment) {
    generate_synthetic(cfg).unwrap()
}

pub fn split(cfg: &SynthConfig, per_cluster: usize) -> (Dataset, Dataset, TrueAssignment) {
    let (ds, truth) = corpus(cfg);
    let (train, test) = holdout_speakers(&ds, &truth, per_cluster).unwrap();
    (train, test, truth)
}

/// `z`-sigma two-sided binomial band around `100 p` for `n` trials, in percent.
pub fn binomial_band(p: f64, n: usize, z: f64) -> (f64, f64) {
    let sigma = 100.0 * (p * (1.0 - p) / n as f64).sqrt();
    (100.0 * p - z * sigma, 100.0 * p + z * sigma)
}

/// A fold in which 10 of 12 validation speakers are matched.
///
/// Home clusters are `A` and `B`; the fold re-clusters the four training
/// speakers the same way. Validation speakers `va*` and `vb*` point at their
/// own cluster except `va5` and `vb5`, which point at the other one.
pub fn hand_fold() -> (
    csat_core::clustering::Clustering,
    csat_core::clustering::Clustering,
    BTreeMap<String, SpeakerEmbedding>,
) {
    use csat_core::clustering::Clustering;
    let e = |x: f64, y: f64| SpeakerEmbedding::from_raw(DVector::from_vec(vec![x, y]), 1).unwrap();
    let train = ["ta0", "ta1", "tb0", "tb1"];
    let fold = Clustering::new(2, train.iter().map(|s| s.to_string()).collect(), vec![0, 0, 1, 1], Vec::new())
        .unwrap()
        .with_embeddings(vec![e(1.0, 0.0), e(0.0, 1.0)])
        .unwrap();
    let mut validation = BTreeMap::new();
    for i in 0..6 {
        let wrong = i == 5;
        validation.insert(format!("va{i}"), if wrong { e(0.1, 1.0) } else { e(1.0, 0.1 * i as f64) });
        validation.insert(format!("vb{i}"), if wrong { e(1.0, 0.1) } else { e(0.1 * i as f64, 1.0) });
    }
    let mut ids: Vec<String> = train.iter().map(|s| s.to_string()).collect();
    ids.extend(validation.keys().cloned());
    let labels = ids.iter().map(|s| usize::from(s.starts_with("tb") || s.starts_with("vb"))).collect();
    let home = Clustering::new(2, ids, labels, Vec::new()).unwrap();
    (fold, home, validation)
}
