//! Unit-length speaker embeddings from a GMM background model.
//!
//! A speaker's frames MAP-adapt the background means; the stacked adapted means
//! (the supervector) are projected onto leading principal directions and
//! normalized. Inner products of these embeddings serve as speaker similarity.

mod gmm;
mod projection;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::{parallel, Error, Result};

pub use gmm::{
    train_ubm, train_ubm_traced, CovarianceType, Covariances, Gmm, UbmFit, EM_TOLERANCE,
    VARIANCE_FLOOR_RATIO,
};
pub use projection::{fit_projection, Projection};

pub const DEFAULT_RELEVANCE: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    vector: DVector<f64>,
    source_frames: usize,
}

impl SpeakerEmbedding {
    /// Normalizes `raw` to unit length.
    pub fn from_raw(raw: DVector<f64>, source_frames: usize) -> Result<Self> {
        let norm = raw.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        Ok(SpeakerEmbedding {
            vector: raw / norm,
            source_frames,
        })
    }

    /// Wraps an already unit-norm vector, checking the norm to `tol`.
    pub fn from_unit(vector: DVector<f64>, source_frames: usize, tol: f64) -> Result<Self> {
        let norm = vector.norm();
        if !((norm - 1.0).abs() <= tol) {
            return Err(Error::Validation(format!(
                "embedding norm {norm} is not within {tol:e} of 1"
            )));
        }
        Ok(SpeakerEmbedding {
            vector,
            source_frames,
        })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn source_frames(&self) -> usize {
        self.source_frames
    }
}

/// Inner product of two unit embeddings.
pub fn similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    a.vector.dot(&b.vector)
}

/// MAP-adapted mean supervector: `m'_k = (n_k xbar_k + r m_k) / (n_k + r)`,
/// stacked in component order.
pub fn adapt_supervector(gmm: &Gmm, frames: &DMatrix<f64>, relevance: f64) -> Result<DVector<f64>> {
    if frames.nrows() == 0 {
        return Err(Error::Argument("cannot adapt to zero frames".into()));
    }
    if !(relevance > 0.0) {
        return Err(Error::Argument(format!("relevance must be positive, got {relevance}")));
    }
    let (resp, _) = gmm.posteriors(frames)?;
    let (k, d) = (gmm.n_components(), gmm.dim());
    let mut sv = DVector::zeros(k * d);
    for j in 0..k {
        let col = resp.column(j);
        let n_j = col.sum();
        for c in 0..d {
            let first_order: f64 = col.iter().zip(frames.column(c).iter()).map(|(g, x)| g * x).sum();
            sv[j * d + c] = (first_order + relevance * gmm.means()[(j, c)]) / (n_j + relevance);
        }
    }
    Ok(sv)
}

/// Normalized projection of the MAP supervector of `frames`.
pub fn extract_embedding(
    gmm: &Gmm,
    proj: &Projection,
    frames: &DMatrix<f64>,
    relevance: f64,
) -> Result<SpeakerEmbedding> {
    let sv = adapt_supervector(gmm, frames, relevance)?;
    SpeakerEmbedding::from_raw(proj.apply(&sv)?, frames.nrows())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub ubm_components: usize,
    pub covariance: CovarianceType,
    pub em_iters: usize,
    pub relevance: f64,
    /// Requested embedding size; clipped to `min(n_speakers - 1, supervector length)`.
    pub embedding_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            ubm_components: 8,
            covariance: CovarianceType::Diagonal,
            em_iters: 20,
            relevance: DEFAULT_RELEVANCE,
            embedding_dim: 10,
        }
    }
}

/// Background model, projection and relevance factor bundled together.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub gmm: Gmm,
    pub projection: Projection,
    pub relevance: f64,
}

impl Embedder {
    /// Trains the background model on all frames of `dataset` and fits the
    /// projection on its per-speaker supervectors.
    pub fn fit(dataset: &Dataset, cfg: &EmbeddingConfig, seed: u64) -> Result<Self> {
        let (frames, _) = dataset.stacked();
        let gmm = train_ubm(&frames, cfg.ubm_components, cfg.covariance, cfg.em_iters, seed)?;
        Self::fit_projection_for(gmm, dataset, cfg)
    }

    /// Fits only the projection, reusing an existing background model.
    pub fn fit_projection_for(gmm: Gmm, dataset: &Dataset, cfg: &EmbeddingConfig) -> Result<Self> {
        let speakers = dataset.speakers();
        let svs = parallel::ordered_map(speakers, |s| {
            adapt_supervector(&gmm, &s.stacked_frames(), cfg.relevance)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let width = gmm.n_components() * gmm.dim();
        if speakers.len() < 2 {
            return Err(Error::Argument("need at least 2 speakers to fit a projection".into()));
        }
        let dim = cfg.embedding_dim.min(speakers.len() - 1).min(width);
        let mat = DMatrix::from_fn(svs.len(), width, |r, c| svs[r][c]);
        let projection = fit_projection(&mat, dim)?;
        Ok(Embedder {
            gmm,
            projection,
            relevance: cfg.relevance,
        })
    }

    pub fn embed(&self, frames: &DMatrix<f64>) -> Result<SpeakerEmbedding> {
        extract_embedding(&self.gmm, &self.projection, frames, self.relevance)
    }

    /// Embeds every speaker of `dataset` from all of their frames.
    pub fn embed_speakers(&self, dataset: &Dataset) -> Result<BTreeMap<String, SpeakerEmbedding>> {
        let speakers = dataset.speakers();
        let embs = parallel::ordered_map(speakers, |s| {
            self.embed(&s.stacked_frames())
                .map_err(|e| Error::DegenerateEmbedding(format!("speaker {}: {e}", s.id)))
        });
        speakers
            .iter()
            .zip(embs)
            .map(|(s, e)| Ok((s.id.clone(), e?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_component(mean: f64) -> Gmm {
        Gmm::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, mean),
            Covariances::Diagonal(DMatrix::from_element(1, 1, 1.0)),
            DVector::from_element(1, 1e-4),
        )
        .unwrap()
    }

    #[test]
    fn similarity_examples() {
        let a = SpeakerEmbedding::from_raw(DVector::from_vec(vec![1.0, 0.0]), 1).unwrap();
        let b = SpeakerEmbedding::from_raw(DVector::from_vec(vec![0.0, 1.0]), 1).unwrap();
        assert_eq!(similarity(&a, &a), 1.0);
        assert_eq!(similarity(&a, &b), 0.0);
        let c = SpeakerEmbedding::from_unit(DVector::from_vec(vec![0.6, 0.8]), 1, 1e-12).unwrap();
        let d = SpeakerEmbedding::from_unit(DVector::from_vec(vec![0.8, 0.6]), 1, 1e-12).unwrap();
        assert!((similarity(&c, &d) - 0.96).abs() < 1e-15);
    }

    #[test]
    fn map_hand_case() {
        // (16 * 1 + 16 * 0) / 32
        let frames = DMatrix::from_element(16, 1, 1.0);
        let sv = adapt_supervector(&one_component(0.0), &frames, 16.0).unwrap();
        assert!((sv[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn map_small_relevance_tends_to_frame_mean() {
        let frames = DMatrix::from_column_slice(3, 1, &[2.0, 2.5, 3.5]);
        let sv = adapt_supervector(&one_component(0.0), &frames, 1e-12).unwrap();
        assert!((sv[0] - 8.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn map_unassigned_component_keeps_ubm_mean() {
        // Component 1 sits so far away its posterior underflows to exactly zero.
        let gmm = Gmm::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1e6]),
            Covariances::Diagonal(DMatrix::from_element(2, 1, 1.0)),
            DVector::from_element(1, 1e-4),
        )
        .unwrap();
        let frames = DMatrix::from_column_slice(4, 1, &[0.1, -0.2, 0.3, 0.0]);
        let sv = adapt_supervector(&gmm, &frames, 16.0).unwrap();
        assert_eq!(sv[1], 1e6);
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(adapt_supervector(&one_component(0.0), &DMatrix::zeros(0, 1), 16.0).is_err());
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let gmm = one_component(0.0);
        let proj = Projection::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        // Frames at the UBM mean adapt to exactly the projection mean.
        let frames = DMatrix::from_element(4, 1, 0.0);
        assert!(matches!(
            extract_embedding(&gmm, &proj, &frames, 16.0),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn extracted_embedding_is_unit_and_deterministic() {
        let gmm = one_component(0.0);
        let proj = Projection::new(DVector::from_element(1, -0.3), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let frames = DMatrix::from_column_slice(5, 1, &[0.4, 1.0, -0.2, 0.7, 2.0]);
        let a = extract_embedding(&gmm, &proj, &frames, 16.0).unwrap();
        let b = extract_embedding(&gmm, &proj, &frames, 16.0).unwrap();
        assert_eq!(a, b);
        assert!((a.vector().norm() - 1.0).abs() < 1e-10);
        assert_eq!(a.source_frames(), 5);
    }
}
