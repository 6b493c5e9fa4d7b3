//! Speaker-cluster adaptive training.
//!
//! A [`SatModel`] keeps one speaker-dependent (SD) layer per cluster at a fixed
//! depth and shares every other layer across clusters. Training alternates two
//! phases per iteration:
//!
//! * **A**: for each cluster, SGD on that cluster's frames updating only its SD
//!   layer;
//! * **B**: SGD on all frames, each routed through its own cluster's SD layer,
//!   updating only the shared layers.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::corpus::Dataset;
use crate::network::train::select_rows;
use crate::network::{
    apply_update, check_layers, forward_layers, frame_scores, loss_grad_layers, sgd_epoch,
    EvalMetrics, Gradients, LayerParams, Network, NetworkSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatTrainConfig {
    pub lr_sd: f64,
    pub lr_shared: f64,
    pub max_iters: usize,
    /// Stop once the relative objective improvement of an iteration drops below this.
    pub convergence_threshold: f64,
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// One full-batch gradient step per epoch, frames in dataset order.
    pub deterministic_full_batch: bool,
}

impl Default for SatTrainConfig {
    fn default() -> Self {
        SatTrainConfig {
            lr_sd: 0.1,
            lr_shared: 0.1,
            max_iters: 10,
            convergence_threshold: 1e-4,
            epochs_per_phase: 1,
            batch_size: 128,
            seed: 0,
            deterministic_full_batch: false,
        }
    }
}

impl SatTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_sd >= 0.0 && self.lr_shared >= 0.0) {
            return Err(Error::Argument("SAT learning rates must be nonnegative".into()));
        }
        if self.max_iters == 0 || self.epochs_per_phase == 0 || self.batch_size == 0 {
            return Err(Error::Argument(
                "max_iters, epochs_per_phase and batch_size must be positive".into(),
            ));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Argument("convergence_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatModel {
    spec: NetworkSpec,
    sd_index: usize,
    /// Every layer except `sd_index`, bottom to top.
    shared: Vec<LayerParams>,
    sd_layers: Vec<LayerParams>,
}

impl SatModel {
    pub fn new(
        spec: NetworkSpec,
        sd_index: usize,
        shared: Vec<LayerParams>,
        sd_layers: Vec<LayerParams>,
    ) -> Result<Self> {
        spec.validate()?;
        if sd_index >= spec.n_layers() {
            return Err(Error::Argument(format!(
                "SD layer index {sd_index} out of range for {} layers",
                spec.n_layers()
            )));
        }
        if sd_layers.is_empty() {
            return Err(Error::Validation("SAT model needs at least one SD layer".into()));
        }
        if shared.len() + 1 != spec.n_layers() {
            return Err(Error::Validation(format!(
                "{} shared layers for a {}-layer spec",
                shared.len(),
                spec.n_layers()
            )));
        }
        let model = SatModel {
            spec,
            sd_index,
            shared,
            sd_layers,
        };
        for c in 0..model.k() {
            check_layers(&model.spec, model.layer_refs(c).into_iter())?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn sd_index(&self) -> usize {
        self.sd_index
    }

    pub fn k(&self) -> usize {
        self.sd_layers.len()
    }

    pub fn shared_layers(&self) -> &[LayerParams] {
        &self.shared
    }

    pub fn sd_layers(&self) -> &[LayerParams] {
        &self.sd_layers
    }

    /// Layer stack seen by frames of `cluster`.
    fn layer_refs(&self, cluster: usize) -> Vec<&LayerParams> {
        let mut shared = self.shared.iter();
        (0..self.spec.n_layers())
            .map(|l| {
                if l == self.sd_index {
                    &self.sd_layers[cluster]
                } else {
                    shared.next().expect("one shared layer per non-SD position")
                }
            })
            .collect()
    }

    fn shared_position(&self, layer: usize) -> usize {
        if layer < self.sd_index {
            layer
        } else {
            layer - 1
        }
    }

    /// The full network for `cluster`, as an independent value.
    pub fn compose(&self, cluster: usize) -> Result<Network> {
        if cluster >= self.k() {
            return Err(Error::Argument(format!(
                "cluster {cluster} out of range for k = {}",
                self.k()
            )));
        }
        Network::new(
            self.spec.clone(),
            self.layer_refs(cluster).into_iter().cloned().collect(),
        )
    }

    /// Logits of `frames` routed through `cluster`'s SD layer.
    pub fn forward_routed(&self, frames: &DMatrix<f64>, cluster: usize) -> Result<DMatrix<f64>> {
        if cluster >= self.k() {
            return Err(Error::Argument(format!("cluster {cluster} out of range")));
        }
        Ok(forward_layers(&self.spec, &self.layer_refs(cluster), frames)?.0)
    }

    /// Frame metrics with each speaker routed through its assigned cluster.
    pub fn evaluate_routed(
        &self,
        dataset: &Dataset,
        assignment: &BTreeMap<String, usize>,
    ) -> Result<EvalMetrics> {
        let mut loss = 0.0;
        let mut correct = 0;
        let mut frames = 0;
        for spk in dataset.speakers() {
            let c = cluster_for(assignment, &spk.id, self.k())?;
            for utt in &spk.utterances {
                let logits = self.forward_routed(&utt.frames, c)?;
                let (l, k) = frame_scores(&logits, &utt.targets);
                loss += l;
                correct += k;
                frames += utt.n_frames();
            }
        }
        Ok(EvalMetrics::from_sums(loss, correct, frames))
    }
}

fn cluster_for(assignment: &BTreeMap<String, usize>, speaker: &str, k: usize) -> Result<usize> {
    let c = *assignment
        .get(speaker)
        .ok_or_else(|| Error::Argument(format!("speaker {speaker} has no cluster assignment")))?;
    if c >= k {
        return Err(Error::Argument(format!(
            "speaker {speaker} assigned to cluster {c} but the model has k = {k}"
        )));
    }
    Ok(c)
}

/// Duplicates layer `sd_index` of `si` into `k` SD layers and shares the rest.
pub fn build_sat(si: &Network, k: usize, sd_index: usize) -> Result<SatModel> {
    if k == 0 {
        return Err(Error::Argument("SAT model needs k >= 1".into()));
    }
    if sd_index >= si.n_layers() {
        return Err(Error::Argument(format!(
            "SD layer index {sd_index} out of range for {} layers",
            si.n_layers()
        )));
    }
    let shared = si
        .layers()
        .iter()
        .enumerate()
        .filter(|(l, _)| *l != sd_index)
        .map(|(_, p)| p.clone())
        .collect();
    let sd_layers = vec![si.layer(sd_index).clone(); k];
    SatModel::new(si.spec().clone(), sd_index, shared, sd_layers)
}

/// Training frames with their cluster routing, in dataset order.
struct RoutedFrames {
    frames: DMatrix<f64>,
    targets: Vec<u32>,
    cluster: Vec<usize>,
}

impl RoutedFrames {
    fn new(dataset: &Dataset, assignment: &BTreeMap<String, usize>, k: usize) -> Result<Self> {
        let mut cluster = Vec::with_capacity(dataset.n_frames());
        for spk in dataset.speakers() {
            let c = cluster_for(assignment, &spk.id, k)?;
            cluster.extend(std::iter::repeat_n(c, spk.n_frames()));
        }
        let (frames, targets) = dataset.stacked();
        Ok(RoutedFrames {
            frames,
            targets,
            cluster,
        })
    }

    fn cluster_rows(&self, c: usize) -> Vec<usize> {
        (0..self.cluster.len()).filter(|&i| self.cluster[i] == c).collect()
    }
}

fn phase_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Mean routed cross-entropy over the training frames.
fn routed_objective(model: &SatModel, data: &RoutedFrames) -> Result<f64> {
    let mut loss = 0.0;
    for c in 0..model.k() {
        let rows = data.cluster_rows(c);
        if rows.is_empty() {
            continue;
        }
        let x = select_rows(&data.frames, &rows);
        let t: Vec<u32> = rows.iter().map(|&i| data.targets[i]).collect();
        loss += frame_scores(&model.forward_routed(&x, c)?, &t).0;
    }
    Ok(loss / data.targets.len() as f64)
}

/// Phase A for every cluster: SD-only SGD on that cluster's frames.
fn phase_sd(model: &mut SatModel, data: &RoutedFrames, cfg: &SatTrainConfig, iteration: usize) -> Result<()> {
    let mut freeze = vec![true; model.spec.n_layers()];
    freeze[model.sd_index] = false;
    for c in 0..model.k() {
        let rows = data.cluster_rows(c);
        if rows.is_empty() {
            continue;
        }
        let x = select_rows(&data.frames, &rows);
        let t: Vec<u32> = rows.iter().map(|&i| data.targets[i]).collect();
        let mut net = model.compose(c)?;
        let mut rng = phase_rng(cfg.seed, iteration, c as u64);
        for _ in 0..cfg.epochs_per_phase {
            if cfg.deterministic_full_batch {
                sgd_epoch(&mut net, &x, &t, &freeze, cfg.lr_sd, rows.len(), None)?;
            } else {
                sgd_epoch(&mut net, &x, &t, &freeze, cfg.lr_sd, cfg.batch_size, Some(&mut rng))?;
            }
        }
        model.sd_layers[c] = net.layer(model.sd_index).clone();
    }
    Ok(())
}

/// Phase B: shared-layer SGD over all frames with per-cluster routing.
///
/// Each minibatch is split by cluster; the per-cluster gradients (each scaled by
/// the full minibatch size) are summed in cluster order.
fn phase_shared(model: &mut SatModel, data: &RoutedFrames, cfg: &SatTrainConfig, iteration: usize) -> Result<()> {
    let n = data.targets.len();
    let mut freeze = vec![false; model.spec.n_layers()];
    freeze[model.sd_index] = true;
    let mut rng = phase_rng(cfg.seed, iteration, u64::MAX);
    let batch = if cfg.deterministic_full_batch { n } else { cfg.batch_size };
    for _ in 0..cfg.epochs_per_phase {
        let mut order: Vec<usize> = (0..n).collect();
        if !cfg.deterministic_full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let scale = 1.0 / chunk.len() as f64;
            let mut total: Option<Gradients> = None;
            for c in 0..model.k() {
                let rows: Vec<usize> = chunk.iter().copied().filter(|&i| data.cluster[i] == c).collect();
                if rows.is_empty() {
                    continue;
                }
                let x = select_rows(&data.frames, &rows);
                let t: Vec<u32> = rows.iter().map(|&i| data.targets[i]).collect();
                let (_, g) = loss_grad_layers(&model.spec, &model.layer_refs(c), &x, &t, &freeze, scale)?;
                match total.as_mut() {
                    None => total = Some(g),
                    Some(acc) => acc.accumulate(&g),
                }
            }
            let Some(grads) = total else { continue };
            for (l, g) in grads.layers.iter().enumerate() {
                if l == model.sd_index {
                    continue;
                }
                let pos = model.shared_position(l);
                apply_update(&mut model.shared[pos], g, cfg.lr_shared);
            }
        }
    }
    Ok(())
}

/// One alternating iteration (phase A then phase B). Returns the updated model
/// and the mean routed training cross-entropy afterwards.
pub fn sat_iteration(
    model: &SatModel,
    dataset: &Dataset,
    assignment: &BTreeMap<String, usize>,
    cfg: &SatTrainConfig,
    iteration: usize,
) -> Result<(SatModel, f64)> {
    cfg.validate()?;
    let data = RoutedFrames::new(dataset, assignment, model.k())?;
    let mut next = model.clone();
    phase_sd(&mut next, &data, cfg, iteration)?;
    phase_shared(&mut next, &data, cfg, iteration)?;
    let objective = routed_objective(&next, &data)?;
    Ok((next, objective))
}

/// Per-phase access for tests and diagnostics: runs only phase A.
pub fn sat_phase_sd(
    model: &SatModel,
    dataset: &Dataset,
    assignment: &BTreeMap<String, usize>,
    cfg: &SatTrainConfig,
    iteration: usize,
) -> Result<SatModel> {
    cfg.validate()?;
    let data = RoutedFrames::new(dataset, assignment, model.k())?;
    let mut next = model.clone();
    phase_sd(&mut next, &data, cfg, iteration)?;
    Ok(next)
}

/// Runs only phase B.
pub fn sat_phase_shared(
    model: &SatModel,
    dataset: &Dataset,
    assignment: &BTreeMap<String, usize>,
    cfg: &SatTrainConfig,
    iteration: usize,
) -> Result<SatModel> {
    cfg.validate()?;
    let data = RoutedFrames::new(dataset, assignment, model.k())?;
    let mut next = model.clone();
    phase_shared(&mut next, &data, cfg, iteration)?;
    Ok(next)
}

/// Outcome of [`train_sat`].
#[derive(Debug, Clone)]
pub struct SatTraining {
    pub model: SatModel,
    /// Routed training cross-entropy of the model before the first iteration.
    pub initial_objective: f64,
    /// Objective after each executed iteration.
    pub history: Vec<f64>,
}

/// Builds a SAT model from `si` and iterates [`sat_iteration`] up to
/// `max_iters` times, stopping after the first iteration whose relative
/// improvement `(prev - cur) / |prev|` falls below the threshold. The first
/// iteration is compared against the untrained model's objective.
pub fn train_sat(
    si: &Network,
    dataset: &Dataset,
    clustering: &Clustering,
    sd_index: usize,
    cfg: &SatTrainConfig,
) -> Result<SatTraining> {
    cfg.validate()?;
    let assignment = clustering.assignment();
    let mut model = build_sat(si, clustering.k(), sd_index)?;
    let data = RoutedFrames::new(dataset, &assignment, model.k())?;
    let initial_objective = routed_objective(&model, &data)?;
    let mut prev = initial_objective;
    let mut history = Vec::with_capacity(cfg.max_iters);
    for it in 0..cfg.max_iters {
        phase_sd(&mut model, &data, cfg, it)?;
        phase_shared(&mut model, &data, cfg, it)?;
        let cur = routed_objective(&model, &data)?;
        history.push(cur);
        let improvement = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
        if improvement < cfg.convergence_threshold {
            break;
        }
        prev = cur;
    }
    Ok(SatTraining {
        model,
        initial_objective,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;

    fn si() -> Network {
        let spec = NetworkSpec::stacked(3, 3, 8, Activation::Pnorm { p: 2.0, group_size: 2 }, 3).unwrap();
        Network::init(spec, 4).unwrap()
    }

    #[test]
    fn build_bounds_and_identity() {
        let net = si();
        assert!(build_sat(&net, 2, 3).is_err());
        assert!(build_sat(&net, 0, 0).is_err());
        let one = build_sat(&net, 1, 1).unwrap();
        assert_eq!(one.compose(0).unwrap(), net);
        let three = build_sat(&net, 3, 0).unwrap();
        let x = DMatrix::from_fn(5, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0) * 0.4);
        let base = net.predict(&x).unwrap();
        for c in 0..3 {
            assert_eq!(three.compose(c).unwrap().predict(&x).unwrap(), base);
            assert_eq!(three.forward_routed(&x, c).unwrap(), base);
        }
        assert!(three.compose(3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SatTrainConfig::default().validate().is_ok());
        let bad = SatTrainConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let inf = SatTrainConfig {
            convergence_threshold: f64::INFINITY,
            ..Default::default()
        };
        assert!(inf.validate().is_ok());
    }
}
