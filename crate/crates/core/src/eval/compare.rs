use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clustering::{match_cluster, Clustering};
use crate::corpus::{Dataset, Speaker};
use crate::embedding::Embedder;
use crate::network::{frame_scores, EvalMetrics, Network};
use crate::parallel;
use crate::sat::SatModel;
use crate::{Error, Result};

use super::table::{render_text, render_tsv};

/// Which frames of a test speaker feed their embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    #[default]
    AllUtterances,
    FirstUtterance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRow {
    pub speaker: String,
    pub cluster: usize,
    pub frames: usize,
    pub si_cross_entropy: f64,
    pub si_accuracy: f64,
    pub sat_cross_entropy: f64,
    pub sat_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub si_cross_entropy: f64,
    pub si_accuracy: f64,
    pub sat_cross_entropy: f64,
    pub sat_accuracy: f64,
    pub frames: usize,
    pub rows: Vec<SpeakerRow>,
}

const HEADERS: [&str; 7] = [
    "speaker",
    "cluster",
    "frames",
    "si_ce",
    "si_acc",
    "sat_ce",
    "sat_acc",
];

impl ComparisonReport {
    pub fn si(&self) -> EvalMetrics {
        EvalMetrics {
            cross_entropy: self.si_cross_entropy,
            accuracy: self.si_accuracy,
            frames: self.frames,
        }
    }

    pub fn sat(&self) -> EvalMetrics {
        EvalMetrics {
            cross_entropy: self.sat_cross_entropy,
            accuracy: self.sat_accuracy,
            frames: self.frames,
        }
    }

    fn table_rows(&self) -> Vec<Vec<String>> {
        let fmt = |ce: f64, acc: f64| [format!("{ce:.6}"), format!("{acc:.6}")];
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let [a, b] = fmt(r.si_cross_entropy, r.si_accuracy);
                let [c, d] = fmt(r.sat_cross_entropy, r.sat_accuracy);
                vec![r.speaker.clone(), r.cluster.to_string(), r.frames.to_string(), a, b, c, d]
            })
            .collect();
        let [a, b] = fmt(self.si_cross_entropy, self.si_accuracy);
        let [c, d] = fmt(self.sat_cross_entropy, self.sat_accuracy);
        rows.push(vec!["ALL".into(), "-".into(), self.frames.to_string(), a, b, c, d]);
        rows
    }

    pub fn to_text(&self) -> String {
        render_text(&HEADERS, &self.table_rows())
    }

    pub fn to_tsv(&self) -> String {
        render_tsv(&HEADERS, &self.table_rows())
    }
}

fn speaker_sums(net: &Network, spk: &Speaker) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for utt in &spk.utterances {
        let (l, c) = frame_scores(&net.predict(&utt.frames)?, &utt.targets);
        loss += l;
        correct += c;
    }
    Ok((loss, correct))
}

/// Scores the SI network and the matched SAT composed networks on `test`.
///
/// Each test speaker is embedded (from `source`), matched to a cluster of
/// `clustering`, and decoded with that cluster's composed network. Summary
/// figures are frame-weighted over speakers.
pub fn compare_si_sat(
    si: &Network,
    sat: &SatModel,
    clustering: &Clustering,
    test: &Dataset,
    embedder: &Embedder,
    source: EmbeddingSource,
) -> Result<ComparisonReport> {
    if si.spec() != sat.spec() {
        return Err(Error::Argument("SI network and SAT model have different topologies".into()));
    }
    if test.feature_dim() != si.spec().input_dim() || test.feature_dim() != embedder.gmm.dim() {
        return Err(Error::Argument(format!(
            "test features have dimension {}, network expects {} and background model {}",
            test.feature_dim(),
            si.spec().input_dim(),
            embedder.gmm.dim()
        )));
    }
    if clustering.k() != sat.k() {
        return Err(Error::Argument(format!(
            "clustering has k = {} but SAT model has {} SD layers",
            clustering.k(),
            sat.k()
        )));
    }
    let trained: BTreeSet<&str> = clustering.speakers().iter().map(String::as_str).collect();
    if let Some(s) = test.speakers().iter().find(|s| trained.contains(s.id.as_str())) {
        return Err(Error::Argument(format!(
            "test speaker {} was also a training speaker",
            s.id
        )));
    }
    let composed = (0..sat.k()).map(|c| sat.compose(c)).collect::<Result<Vec<_>>>()?;
    let rows = parallel::ordered_map(test.speakers(), |spk| {
        let frames = match source {
            EmbeddingSource::AllUtterances => spk.stacked_frames(),
            EmbeddingSource::FirstUtterance => spk.utterances[0].frames.clone(),
        };
        let emb = embedder
            .embed(&frames)
            .map_err(|e| Error::DegenerateEmbedding(format!("speaker {}: {e}", spk.id)))?;
        let cluster = match_cluster(&emb, clustering)?;
        let (si_loss, si_correct) = speaker_sums(si, spk)?;
        let (sat_loss, sat_correct) = speaker_sums(&composed[cluster], spk)?;
        Ok((cluster, si_loss, si_correct, sat_loss, sat_correct))
    });
    let mut out = Vec::with_capacity(rows.len());
    let (mut si_l, mut si_c, mut sat_l, mut sat_c, mut total) = (0.0, 0, 0.0, 0, 0);
    for (spk, row) in test.speakers().iter().zip(rows) {
        let (cluster, a, b, c, d) = row?;
        let n = spk.n_frames();
        si_l += a;
        si_c += b;
        sat_l += c;
        sat_c += d;
        total += n;
        let si = EvalMetrics::from_sums(a, b, n);
        let sat = EvalMetrics::from_sums(c, d, n);
        out.push(SpeakerRow {
            speaker: spk.id.clone(),
            cluster,
            frames: n,
            si_cross_entropy: si.cross_entropy,
            si_accuracy: si.accuracy,
            sat_cross_entropy: sat.cross_entropy,
            sat_accuracy: sat.accuracy,
        });
    }
    let si = EvalMetrics::from_sums(si_l, si_c, total);
    let sat = EvalMetrics::from_sums(sat_l, sat_c, total);
    Ok(ComparisonReport {
        si_cross_entropy: si.cross_entropy,
        si_accuracy: si.accuracy,
        sat_cross_entropy: sat.cross_entropy,
        sat_accuracy: sat.accuracy,
        frames: total,
        rows: out,
    })
}
