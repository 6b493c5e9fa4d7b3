//! Synthetic speaker corpora with a known cluster structure.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Speaker, Utterance};
use crate::{Error, Result};

/// Ground truth from the generator: speaker id to true cluster index.
pub type TrueAssignment = BTreeMap<String, usize>;

/// Per-speaker offset standard deviation, as a fraction of `noise_scale`.
const SPEAKER_JITTER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_clusters_true: usize,
    pub speakers_per_cluster: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    /// Euclidean norm of each cluster's mean offset.
    pub cluster_shift_scale: f64,
    /// Standard deviation of the per-frame isotropic noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clusters_true: 3,
            speakers_per_cluster: 8,
            utterances_per_speaker: 4,
            frames_per_utterance: 40,
            feature_dim: 16,
            n_classes: 16,
            cluster_shift_scale: 3.0,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_clusters_true", self.n_clusters_true),
            ("speakers_per_cluster", self.speakers_per_cluster),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("frames_per_utterance", self.frames_per_utterance),
            ("feature_dim", self.feature_dim),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be at least 1")));
            }
        }
        if !(self.cluster_shift_scale >= 0.0 && self.cluster_shift_scale.is_finite()) {
            return Err(Error::Argument("cluster_shift_scale must be >= 0".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Argument("noise_scale must be > 0".into()));
        }
        Ok(())
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draws a corpus whose speakers fall into `n_clusters_true` groups.
///
/// Frame `x` of class `y` for a speaker in cluster `c` is
/// `class_mean[y] + shift[c] + speaker_offset + noise`, with class means drawn
/// from a standard normal, `|shift[c]| = cluster_shift_scale` in a random
/// direction, speaker offsets at `0.2 * noise_scale` per dimension and
/// isotropic noise at `noise_scale`. Targets are uniform per frame.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, TrueAssignment)> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let class_means: Vec<DVector<f64>> =
        (0..cfg.n_classes).map(|_| gaussian_vector(&mut rng, d)).collect();
    let shifts: Vec<DVector<f64>> = (0..cfg.n_clusters_true)
        .map(|_| {
            let dir = gaussian_vector(&mut rng, d);
            let norm = dir.norm();
            if norm == 0.0 {
                DVector::zeros(d)
            } else {
                dir * (cfg.cluster_shift_scale / norm)
            }
        })
        .collect();

    let mut speakers = Vec::new();
    let mut truth = TrueAssignment::new();
    for (c, shift) in shifts.iter().enumerate() {
        for s in 0..cfg.speakers_per_cluster {
            let spk_id = format!("spk{:04}", c * cfg.speakers_per_cluster + s);
            let offset = gaussian_vector(&mut rng, d) * (SPEAKER_JITTER * cfg.noise_scale);
            let centre = shift + offset;
            let mut utterances = Vec::with_capacity(cfg.utterances_per_speaker);
            for u in 0..cfg.utterances_per_speaker {
                let f = cfg.frames_per_utterance;
                let mut frames = DMatrix::zeros(f, d);
                let mut targets = Vec::with_capacity(f);
                for r in 0..f {
                    let y = rng.random_range(0..cfg.n_classes);
                    targets.push(y as u32);
                    for j in 0..d {
                        let noise: f64 = rng.sample(StandardNormal);
                        frames[(r, j)] = class_means[y][j] + centre[j] + cfg.noise_scale * noise;
                    }
                }
                utterances.push(Utterance::new(format!("utt{u:03}"), frames, targets)?);
            }
            speakers.push(Speaker::new(spk_id.clone(), utterances)?);
            truth.insert(spk_id, c);
        }
    }
    Ok((Dataset::new(speakers, cfg.n_classes, d)?, truth))
}

/// Splits off the last `per_cluster` speakers (by id) of every true cluster as
/// a held-out set. Returns `(train, held_out)`.
pub fn holdout_speakers(
    dataset: &Dataset,
    truth: &TrueAssignment,
    per_cluster: usize,
) -> Result<(Dataset, Dataset)> {
    let mut members: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for id in dataset.speakers().iter().map(|s| s.id.as_str()) {
        let c = truth
            .get(id)
            .ok_or_else(|| Error::Argument(format!("speaker {id} missing from truth map")))?;
        members.entry(*c).or_default().push(id);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (c, ids) in members {
        if per_cluster >= ids.len() {
            return Err(Error::Argument(format!(
                "cannot hold out {per_cluster} of {} speakers in cluster {c}",
                ids.len()
            )));
        }
        let cut = ids.len() - per_cluster;
        train.extend_from_slice(&ids[..cut]);
        held.extend_from_slice(&ids[cut..]);
    }
    Ok((dataset.subset(&train)?, dataset.subset(&held)?))
}
