use crate::clustering::{compute_cluster_embeddings, ward_cluster, Clustering};
use crate::config::{RunConfig, SdLayer};
use crate::corpus::Dataset;
use crate::embedding::Embedder;
use crate::network::{train_si, Network};
use crate::sat::{train_sat, SatTraining};
use crate::{Error, Result};

use super::compare::{compare_si_sat, ComparisonReport, EmbeddingSource};
use super::table::{render_text, render_tsv};

/// Everything produced by one train-and-compare run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub embedder: Embedder,
    pub clustering: Clustering,
    pub si: Network,
    pub sat: SatTraining,
    pub report: ComparisonReport,
}

fn source(cfg: &RunConfig) -> EmbeddingSource {
    if cfg.eval.single_utterance {
        EmbeddingSource::FirstUtterance
    } else {
        EmbeddingSource::AllUtterances
    }
}

/// Fits the embedder on `train`, clusters it, trains SI and SAT, and compares
/// them on `test`. Every random choice derives from `seed`.
pub fn run_pipeline(train: &Dataset, test: &Dataset, cfg: &RunConfig, seed: u64) -> Result<PipelineOutput> {
    cfg.validate()?;
    let embedder = Embedder::fit(train, &cfg.embedding, seed)?;
    let clustering = cluster_train(train, &embedder, cfg.n_clusters)?;
    let spec = cfg.topology.spec(train.feature_dim(), train.n_classes())?;
    let si = train_si(&spec, train, &cfg.si, seed)?;
    let sat_cfg = crate::sat::SatTrainConfig { seed, ..cfg.sat.clone() };
    let sat = train_sat(&si, train, &clustering, cfg.sd_index(), &sat_cfg)?;
    let report = compare_si_sat(&si, &sat.model, &clustering, test, &embedder, source(cfg))?;
    Ok(PipelineOutput {
        embedder,
        clustering,
        si,
        sat,
        report,
    })
}

fn cluster_train(train: &Dataset, embedder: &Embedder, k: usize) -> Result<Clustering> {
    let embs = embedder.embed_speakers(train)?;
    compute_cluster_embeddings(ward_cluster(&embs, k)?, train, embedder)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub k: usize,
    pub sd_layer: SdLayer,
    pub sd_index: usize,
    pub sat_cross_entropy: f64,
    pub sat_accuracy: f64,
}

/// Grid of SAT results over cluster counts and SD-layer positions, with the
/// shared SI baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub ks: Vec<usize>,
    pub positions: Vec<SdLayer>,
    pub si_cross_entropy: f64,
    pub si_accuracy: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    fn cell(&self, k: usize, pos: SdLayer) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k == k && c.sd_layer == pos)
    }

    /// Rows are cluster counts, columns SD-layer positions; each cell shows
    /// held-out cross-entropy and frame accuracy.
    pub fn to_text(&self) -> String {
        let mut headers = vec!["clusters".to_string()];
        headers.extend(self.positions.iter().map(|p| format!("SD={}", p.label())));
        let mut rows = vec![{
            let mut r = vec!["SI".to_string()];
            r.extend(
                self.positions
                    .iter()
                    .map(|_| format!("{:.4} / {:.2}%", self.si_cross_entropy, 100.0 * self.si_accuracy)),
            );
            r
        }];
        for &k in &self.ks {
            let mut r = vec![format!("k={k}")];
            for &p in &self.positions {
                r.push(match self.cell(k, p) {
                    Some(c) => format!("{:.4} / {:.2}%", c.sat_cross_entropy, 100.0 * c.sat_accuracy),
                    None => "-".into(),
                });
            }
            rows.push(r);
        }
        let h: Vec<&str> = headers.iter().map(String::as_str).collect();
        render_text(&h, &rows)
    }

    pub fn to_tsv(&self) -> String {
        let mut rows = vec![vec![
            "0".into(),
            "si".into(),
            "-".into(),
            format!("{:.10}", self.si_cross_entropy),
            format!("{:.10}", self.si_accuracy),
        ]];
        rows.extend(self.cells.iter().map(|c| {
            vec![
                c.k.to_string(),
                c.sd_layer.label(),
                c.sd_index.to_string(),
                format!("{:.10}", c.sat_cross_entropy),
                format!("{:.10}", c.sat_accuracy),
            ]
        }));
        render_tsv(&["k", "sd_layer", "sd_index", "cross_entropy", "accuracy"], &rows)
    }
}

/// Trains the SI network once, then one SAT model per (k, SD position).
pub fn run_sweep(
    train: &Dataset,
    test: &Dataset,
    cfg: &RunConfig,
    ks: &[usize],
    positions: &[SdLayer],
    seed: u64,
) -> Result<SweepReport> {
    cfg.validate()?;
    if let Some(&k) = ks.iter().find(|&&k| k > train.n_speakers()) {
        return Err(Error::Argument(format!(
            "sweep k = {k} exceeds the {} training speakers",
            train.n_speakers()
        )));
    }
    let embedder = Embedder::fit(train, &cfg.embedding, seed)?;
    let spec = cfg.topology.spec(train.feature_dim(), train.n_classes())?;
    let si = train_si(&spec, train, &cfg.si, seed)?;
    let sat_cfg = crate::sat::SatTrainConfig { seed, ..cfg.sat.clone() };
    let mut cells = Vec::new();
    let mut baseline = None;
    for &k in ks {
        let clustering = cluster_train(train, &embedder, k)?;
        for &pos in positions {
            let sd_index = pos.index(spec.n_layers());
            let sat = train_sat(&si, train, &clustering, sd_index, &sat_cfg)?;
            let report = compare_si_sat(&si, &sat.model, &clustering, test, &embedder, source(cfg))?;
            baseline.get_or_insert((report.si_cross_entropy, report.si_accuracy));
            cells.push(SweepCell {
                k,
                sd_layer: pos,
                sd_index,
                sat_cross_entropy: report.sat_cross_entropy,
                sat_accuracy: report.sat_accuracy,
            });
        }
    }
    let (si_cross_entropy, si_accuracy) = match baseline {
        Some(b) => b,
        None => {
            let m = crate::network::evaluate(&si, test)?;
            (m.cross_entropy, m.accuracy)
        }
    };
    Ok(SweepReport {
        ks: ks.to_vec(),
        positions: positions.to_vec(),
        si_cross_entropy,
        si_accuracy,
        cells,
    })
}
