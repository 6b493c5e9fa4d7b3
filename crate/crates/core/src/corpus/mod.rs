//! Speakers, utterances and frame-level classification targets.

mod folds;
mod io;
mod synth;

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::{Error, Result};

pub use folds::split_folds;
pub use io::{load_dataset, read_utterance_file, save_dataset, write_utterance_file};
pub use synth::{generate_synthetic, holdout_speakers, SynthConfig, TrueAssignment};

/// One utterance: an `F x d` frame matrix and one class target per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: DMatrix<f64>,
    pub targets: Vec<u32>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, frames: DMatrix<f64>, targets: Vec<u32>) -> Result<Self> {
        let id = id.into();
        if frames.nrows() == 0 {
            return Err(Error::Validation(format!("utterance {id} has no frames")));
        }
        if frames.nrows() != targets.len() {
            return Err(Error::Validation(format!(
                "utterance {id} has {} frames but {} targets",
                frames.nrows(),
                targets.len()
            )));
        }
        Ok(Utterance {
            id,
            frames,
            targets,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Speaker {
    /// Builds a speaker, sorting its utterances by id.
    pub fn new(id: impl Into<String>, mut utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(Error::Validation(format!("speaker {id} has no utterances")));
        }
        utterances.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in utterances.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Validation(format!(
                    "speaker {id} has duplicate utterance id {}",
                    pair[0].id
                )));
            }
        }
        Ok(Speaker { id, utterances })
    }

    pub fn n_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::n_frames).sum()
    }

    /// All frames of the speaker stacked in utterance order.
    pub fn stacked_frames(&self) -> DMatrix<f64> {
        stack_frames(self.utterances.iter().map(|u| &u.frames))
    }
}

/// An immutable, validated collection of speakers.
///
/// Speakers are kept sorted by id, and each speaker's utterances are sorted by
/// id, so every downstream iteration order is reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    speakers: Vec<Speaker>,
    n_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(mut speakers: Vec<Speaker>, n_classes: usize, feature_dim: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Validation("n_classes must be positive".into()));
        }
        if feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        speakers.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in speakers.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Validation(format!(
                    "duplicate speaker id {}",
                    pair[0].id
                )));
            }
        }
        for spk in &speakers {
            for utt in &spk.utterances {
                if utt.frames.ncols() != feature_dim {
                    return Err(Error::Validation(format!(
                        "utterance {} of speaker {} has feature width {}, expected {}",
                        utt.id,
                        spk.id,
                        utt.frames.ncols(),
                        feature_dim
                    )));
                }
                if let Some(&t) = utt.targets.iter().find(|&&t| t as usize >= n_classes) {
                    return Err(Error::Validation(format!(
                        "utterance {} of speaker {} has target {t} outside [0, {n_classes})",
                        utt.id, spk.id
                    )));
                }
            }
        }
        Ok(Dataset {
            speakers,
            n_classes,
            feature_dim,
        })
    }

    pub fn speakers(&self) -> &[Speaker] {
        &self.speakers
    }

    pub fn speaker(&self, id: &str) -> Option<&Speaker> {
        self.speakers
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.speakers[i])
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_frames(&self) -> usize {
        self.speakers.iter().map(Speaker::n_frames).sum()
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.id.clone()).collect()
    }

    /// A new dataset holding only the named speakers (order-insensitive).
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Dataset> {
        let wanted: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        let mut speakers = Vec::with_capacity(wanted.len());
        for id in &wanted {
            let spk = self
                .speaker(id)
                .ok_or_else(|| Error::Argument(format!("unknown speaker {id}")))?;
            speakers.push(spk.clone());
        }
        Ok(Dataset {
            speakers,
            n_classes: self.n_classes,
            feature_dim: self.feature_dim,
        })
    }

    /// Every frame of the dataset stacked in speaker/utterance order, with targets.
    pub fn stacked(&self) -> (DMatrix<f64>, Vec<u32>) {
        let frames = stack_frames(
            self.speakers
                .iter()
                .flat_map(|s| s.utterances.iter().map(|u| &u.frames)),
        );
        let targets = self
            .speakers
            .iter()
            .flat_map(|s| s.utterances.iter().flat_map(|u| u.targets.iter().copied()))
            .collect();
        (frames, targets)
    }
}

/// Stacks frame matrices vertically. All inputs must share a column count.
pub fn stack_frames<'a>(parts: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let rows: usize = parts.clone().map(|m| m.nrows()).sum();
    let cols = parts.clone().next().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    out
}
