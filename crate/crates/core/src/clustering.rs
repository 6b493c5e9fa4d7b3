//! Ward agglomerative clustering of speakers and nearest-cluster matching.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::corpus::{stack_frames, Dataset};
use crate::embedding::{similarity, Embedder, SpeakerEmbedding};
use crate::{parallel, Error, Result};

/// One agglomeration step.
///
/// Leaves are numbered `0..n` in speaker-id order; the cluster created by
/// merge `s` gets node id `n + s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Increase in total within-cluster sum of squared distances.
    pub cost: f64,
    /// Number of speakers in the merged cluster.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    k: usize,
    speakers: Vec<String>,
    labels: Vec<usize>,
    cluster_embeddings: Vec<SpeakerEmbedding>,
    dendrogram: Vec<Merge>,
}

impl Clustering {
    /// `speakers[i]` belongs to cluster `labels[i]`. Speakers are re-sorted by id.
    pub fn new(
        k: usize,
        speakers: Vec<String>,
        labels: Vec<usize>,
        dendrogram: Vec<Merge>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("clustering needs k >= 1".into()));
        }
        if speakers.len() != labels.len() {
            return Err(Error::Validation("speaker and label counts differ".into()));
        }
        let mut pairs: Vec<(String, usize)> = speakers.into_iter().zip(labels).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("speaker {} assigned twice", w[0].0)));
        }
        let mut sizes = vec![0usize; k];
        for (id, c) in &pairs {
            if *c >= k {
                return Err(Error::Validation(format!(
                    "speaker {id} assigned to cluster {c} but k = {k}"
                )));
            }
            sizes[*c] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("cluster {c} is empty")));
        }
        let (speakers, labels) = pairs.into_iter().unzip();
        Ok(Clustering {
            k,
            speakers,
            labels,
            cluster_embeddings: Vec::new(),
            dendrogram,
        })
    }

    /// Attaches one unit-norm embedding per cluster.
    pub fn with_embeddings(mut self, embeddings: Vec<SpeakerEmbedding>) -> Result<Self> {
        if embeddings.len() != self.k {
            return Err(Error::Validation(format!(
                "{} cluster embeddings supplied for k = {}",
                embeddings.len(),
                self.k
            )));
        }
        for (c, e) in embeddings.iter().enumerate() {
            if (e.vector().norm() - 1.0).abs() > 1e-10 {
                return Err(Error::Validation(format!("cluster {c} embedding is not unit norm")));
            }
        }
        self.cluster_embeddings = embeddings;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dendrogram(&self) -> &[Merge] {
        &self.dendrogram
    }

    pub fn cluster_embeddings(&self) -> &[SpeakerEmbedding] {
        &self.cluster_embeddings
    }

    pub fn has_embeddings(&self) -> bool {
        !self.cluster_embeddings.is_empty()
    }

    pub fn cluster_of(&self, speaker: &str) -> Option<usize> {
        self.speakers
            .binary_search_by(|s| s.as_str().cmp(speaker))
            .ok()
            .map(|i| self.labels[i])
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.speakers
            .iter()
            .zip(&self.labels)
            .filter(|(_, &c)| c == cluster)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.labels {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn assignment(&self) -> BTreeMap<String, usize> {
        self.speakers.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    /// `speaker_id<TAB>cluster_index` lines in speaker order.
    pub fn to_tsv(&self) -> String {
        self.speakers
            .iter()
            .zip(&self.labels)
            .map(|(s, c)| format!("{s}\t{c}\n"))
            .collect()
    }
}

/// Squared Euclidean distance between unit vectors from their inner product.
pub fn squared_distance(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    (2.0 - 2.0 * similarity(a, b)).max(0.0)
}

/// Ward agglomerative clustering down to `k` clusters.
///
/// Distances start as `2 - 2<a, b>` and are updated with the Lance–Williams
/// recurrence for Ward linkage. Among equal-cost candidate pairs, the pair whose
/// (smaller, larger) smallest-member ids sort first is merged. Cluster indices
/// follow the order of each cluster's smallest member id.
pub fn ward_cluster(embeddings: &BTreeMap<String, SpeakerEmbedding>, k: usize) -> Result<Clustering> {
    let n = embeddings.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "cannot form k = {k} clusters from {n} speakers"
        )));
    }
    let ids: Vec<String> = embeddings.keys().cloned().collect();
    let embs: Vec<&SpeakerEmbedding> = embeddings.values().collect();
    let dim = embs[0].dim();
    if let Some((id, _)) = embeddings.iter().find(|(_, e)| e.dim() != dim) {
        return Err(Error::Argument(format!("embedding of {id} has a different dimension")));
    }

    let rows: Vec<usize> = (0..n).collect();
    let mut dist: Vec<Vec<f64>> = parallel::ordered_map(&rows, |&i| {
        (0..n).map(|j| squared_distance(embs[i], embs[j])).collect()
    });
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut dendrogram = Vec::with_capacity(n - k);

    for step in 0..n - k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, d_ij) = best.expect("at least two active clusters");
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for m in (0..n).filter(|&m| active[m] && m != i && m != j) {
            let sm = size[m] as f64;
            let updated = ((si + sm) * dist[i][m] + (sj + sm) * dist[j][m] - sm * d_ij) / (si + sj + sm);
            dist[i][m] = updated;
            dist[m][i] = updated;
        }
        size[i] += size[j];
        active[j] = false;
        dendrogram.push(Merge {
            left: node[i],
            right: node[j],
            cost: d_ij / 2.0,
            size: size[i],
        });
        node[i] = n + step;
    }

    // Slot i of a surviving cluster is its smallest member index; resolve
    // every leaf to its slot by replaying the merges.
    let mut slot_of: Vec<usize> = (0..n).collect();
    let mut node_slot: Vec<usize> = (0..n).collect();
    for m in &dendrogram {
        let (a, b) = (node_slot[m.left], node_slot[m.right]);
        let keep = a.min(b);
        let drop = a.max(b);
        for s in slot_of.iter_mut().filter(|s| **s == drop) {
            *s = keep;
        }
        node_slot.push(keep);
    }
    let survivors: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let labels = slot_of
        .iter()
        .map(|s| survivors.binary_search(s).expect("slot survives"))
        .collect();
    Clustering::new(k, ids, labels, dendrogram)
}

/// Fills each cluster's embedding from the pooled frames of its members.
pub fn compute_cluster_embeddings(
    clustering: Clustering,
    dataset: &Dataset,
    embedder: &Embedder,
) -> Result<Clustering> {
    let clusters: Vec<usize> = (0..clustering.k()).collect();
    let embeddings = parallel::ordered_map(&clusters, |&c| {
        let members = clustering.members(c);
        let mut parts = Vec::new();
        for id in &members {
            let spk = dataset.speaker(id).ok_or_else(|| {
                Error::Argument(format!("clustered speaker {id} is not in the dataset"))
            })?;
            parts.extend(spk.utterances.iter().map(|u| &u.frames));
        }
        let pooled = stack_frames(parts.iter().copied());
        embedder
            .embed(&pooled)
            .map_err(|e| Error::DegenerateEmbedding(format!("cluster {c}: {e}")))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    clustering.with_embeddings(embeddings)
}

/// Cluster embeddings as the normalized mean of member embeddings.
///
/// Used when only embeddings (no frames) are available, e.g. imported vectors.
pub fn mean_member_embeddings(
    clustering: Clustering,
    embeddings: &BTreeMap<String, SpeakerEmbedding>,
) -> Result<Clustering> {
    let mut out = Vec::with_capacity(clustering.k());
    for c in 0..clustering.k() {
        let mut acc: Option<DVector<f64>> = None;
        let mut frames = 0;
        for id in clustering.members(c) {
            let e = embeddings
                .get(id)
                .ok_or_else(|| Error::Argument(format!("no embedding for speaker {id}")))?;
            frames += e.source_frames();
            acc = Some(match acc {
                None => e.vector().clone(),
                Some(a) => a + e.vector(),
            });
        }
        let v = acc.expect("clusters are nonempty");
        out.push(
            SpeakerEmbedding::from_raw(v, frames)
                .map_err(|e| Error::DegenerateEmbedding(format!("cluster {c}: {e}")))?,
        );
    }
    clustering.with_embeddings(out)
}

/// Index of the cluster embedding with the largest inner product with `s`;
/// the lowest index wins ties.
pub fn match_cluster(s: &SpeakerEmbedding, clustering: &Clustering) -> Result<usize> {
    let embs = clustering.cluster_embeddings();
    if embs.is_empty() {
        return Err(Error::Argument("clustering has no cluster embeddings".into()));
    }
    if embs[0].dim() != s.dim() {
        return Err(Error::Argument(format!(
            "speaker embedding has dimension {}, clusters have {}",
            s.dim(),
            embs[0].dim()
        )));
    }
    let mut best = 0;
    let mut best_sim = similarity(s, &embs[0]);
    for (c, e) in embs.iter().enumerate().skip(1) {
        let sim = similarity(s, e);
        if sim > best_sim {
            best = c;
            best_sim = sim;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    pub min_size: usize,
    pub max_size: usize,
    pub avg_size: f64,
}

impl ClusterStats {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let total: usize = sizes.iter().sum();
        ClusterStats {
            min_size: sizes.iter().copied().min().unwrap_or(0),
            max_size: sizes.iter().copied().max().unwrap_or(0),
            avg_size: total as f64 / sizes.len() as f64,
        }
    }
}

pub fn cluster_stats(clustering: &Clustering) -> ClusterStats {
    ClusterStats::from_sizes(&clustering.sizes())
}
