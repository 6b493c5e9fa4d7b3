use std::collections::{BTreeMap, BTreeSet};

use crate::clustering::{compute_cluster_embeddings, match_cluster, ward_cluster, Clustering};
use crate::corpus::{split_folds, Dataset};
use crate::embedding::{Embedder, EmbeddingConfig, SpeakerEmbedding};
use crate::parallel;
use crate::{Error, Result};

use super::table::{render_text, render_tsv};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldScore {
    pub matched: usize,
    pub total: usize,
    pub scma_pct: f64,
}

impl FoldScore {
    pub fn new(matched: usize, total: usize) -> Self {
        let scma_pct = if total == 0 {
            0.0
        } else {
            100.0 * matched as f64 / total as f64
        };
        FoldScore {
            matched,
            total,
            scma_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmaReport {
    pub per_fold: Vec<FoldScore>,
    pub mean_scma_pct: f64,
}

impl ScmaReport {
    pub fn from_folds(per_fold: Vec<FoldScore>) -> Self {
        let mean_scma_pct = per_fold.iter().map(|f| f.scma_pct).sum::<f64>() / per_fold.len().max(1) as f64;
        ScmaReport {
            per_fold,
            mean_scma_pct,
        }
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .per_fold
            .iter()
            .enumerate()
            .map(|(i, f)| {
                vec![
                    i.to_string(),
                    f.matched.to_string(),
                    f.total.to_string(),
                    format!("{:.4}", f.scma_pct),
                ]
            })
            .collect();
        let matched: usize = self.per_fold.iter().map(|f| f.matched).sum();
        let total: usize = self.per_fold.iter().map(|f| f.total).sum();
        rows.push(vec![
            "mean".into(),
            matched.to_string(),
            total.to_string(),
            format!("{:.4}", self.mean_scma_pct),
        ]);
        rows
    }

    pub fn to_text(&self) -> String {
        render_text(&["fold", "matched", "total", "scma_pct"], &self.rows())
    }

    pub fn to_tsv(&self) -> String {
        render_tsv(&["fold", "matched", "total", "scma_pct"], &self.rows())
    }
}

/// Scores one fold.
///
/// A validation speaker counts as matched when [`match_cluster`] against
/// `fold` picks the fold cluster that shares the most members with the
/// speaker's cluster in `home`. Overlap ties go to the lowest fold cluster.
pub fn score_fold(
    fold: &Clustering,
    home: &Clustering,
    validation: &BTreeMap<String, SpeakerEmbedding>,
) -> Result<FoldScore> {
    let mut matched = 0;
    for (id, emb) in validation {
        let h = home
            .cluster_of(id)
            .ok_or_else(|| Error::Argument(format!("validation speaker {id} missing from the home clustering")))?;
        let home_members: BTreeSet<&str> = home.members(h).into_iter().collect();
        let mut best = 0;
        let mut best_overlap = 0;
        for c in 0..fold.k() {
            let overlap = fold.members(c).iter().filter(|s| home_members.contains(*s)).count();
            if overlap > best_overlap {
                best = c;
                best_overlap = overlap;
            }
        }
        if match_cluster(emb, fold)? == best {
            matched += 1;
        }
    }
    Ok(FoldScore::new(matched, validation.len()))
}

/// Speaker-cluster matching accuracy under `k_folds`-fold cross-validation.
///
/// The background model and projection are fitted once on the whole
/// dataset, which is also clustered once to give every speaker a home
/// cluster. Each fold then re-clusters its training side and scores its
/// validation speakers with [`score_fold`].
pub fn scma(
    dataset: &Dataset,
    k_folds: usize,
    n_clusters: usize,
    cfg: &EmbeddingConfig,
    seed: u64,
) -> Result<ScmaReport> {
    let n = dataset.n_speakers();
    if k_folds < 2 || k_folds > n {
        return Err(Error::Argument(format!(
            "cannot split {n} speakers into {k_folds} folds"
        )));
    }
    let smallest_train = n - n.div_ceil(k_folds);
    if smallest_train < n_clusters {
        return Err(Error::Argument(format!(
            "fold training sides can have {smallest_train} speakers, fewer than n_clusters = {n_clusters}"
        )));
    }
    let embedder = Embedder::fit(dataset, cfg, seed)?;
    let all = embedder.embed_speakers(dataset)?;
    let home = ward_cluster(&all, n_clusters)?;
    let folds = split_folds(dataset, k_folds, seed)?;
    let scores = parallel::ordered_map(&folds, |(train, validation)| {
        let train_embs: BTreeMap<String, SpeakerEmbedding> = train
            .speakers()
            .iter()
            .map(|s| (s.id.clone(), all[&s.id].clone()))
            .collect();
        let fold = ward_cluster(&train_embs, n_clusters)?;
        let fold = compute_cluster_embeddings(fold, train, &embedder)?;
        let val_embs: BTreeMap<String, SpeakerEmbedding> = validation
            .speakers()
            .iter()
            .map(|s| (s.id.clone(), all[&s.id].clone()))
            .collect();
        score_fold(&fold, &home, &val_embs)
    });
    Ok(ScmaReport::from_folds(scores.into_iter().collect::<Result<_>>()?))
}
