use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_scores, Network, NetworkSpec};
use crate::corpus::Dataset;
use crate::{Error, Result};

/// Learning rate interpolated geometrically from `initial` to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            final_lr: lr,
        }
    }

    /// Rate for `epoch` in `0..epochs`; the first epoch uses `initial`, the
    /// last uses `final_lr`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 || self.initial == self.final_lr {
            return self.initial;
        }
        let frac = epoch as f64 / (epochs - 1) as f64;
        self.initial * (self.final_lr / self.initial).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiTrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub batch_size: usize,
}

impl Default for SiTrainConfig {
    fn default() -> Self {
        SiTrainConfig {
            epochs: 20,
            schedule: LrSchedule {
                initial: 0.1,
                final_lr: 0.01,
            },
            batch_size: 128,
        }
    }
}

/// Copies the given rows of `m` into a new matrix.
pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// One pass of minibatch SGD over `(frames, targets)`.
///
/// With `rng` the frame order is shuffled first; without it frames are taken
/// in order. Returns the mean loss of the minibatches as they were visited.
pub fn sgd_epoch(
    net: &mut Network,
    frames: &DMatrix<f64>,
    targets: &[u32],
    freeze: &[bool],
    lr: f64,
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let n = frames.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let x = select_rows(frames, chunk);
        let t: Vec<u32> = chunk.iter().map(|&i| targets[i]).collect();
        let (loss, grads) = net.loss_and_grad(&x, &t, freeze)?;
        net.sgd_step(&grads, lr)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Speaker-independent training on every frame of `dataset`.
///
/// Weights come from [`Network::init`] with `seed`; the per-epoch shuffle uses
/// an independent stream of the same seed.
pub fn train_si(spec: &NetworkSpec, dataset: &Dataset, cfg: &SiTrainConfig, seed: u64) -> Result<Network> {
    if dataset.feature_dim() != spec.input_dim() || dataset.n_classes() != spec.n_classes {
        return Err(Error::Argument(format!(
            "dataset ({} features, {} classes) does not fit network ({} inputs, {} classes)",
            dataset.feature_dim(),
            dataset.n_classes(),
            spec.input_dim(),
            spec.n_classes
        )));
    }
    let mut net = Network::init(spec.clone(), seed)?;
    let (frames, targets) = dataset.stacked();
    let freeze = vec![false; spec.n_layers()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at(epoch, cfg.epochs);
        sgd_epoch(&mut net, &frames, &targets, &freeze, lr, cfg.batch_size, Some(&mut rng))?;
    }
    Ok(net)
}

/// Frame-level cross-entropy and accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub frames: usize,
}

impl EvalMetrics {
    pub(crate) fn from_sums(loss_sum: f64, correct: usize, frames: usize) -> Self {
        EvalMetrics {
            cross_entropy: loss_sum / frames as f64,
            accuracy: correct as f64 / frames as f64,
            frames,
        }
    }
}

/// Scores `net` on every frame of `dataset`.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<EvalMetrics> {
    if dataset.feature_dim() != net.spec().input_dim() {
        return Err(Error::Argument(format!(
            "dataset has {} features, network expects {}",
            dataset.feature_dim(),
            net.spec().input_dim()
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut frames = 0;
    for spk in dataset.speakers() {
        for utt in &spk.utterances {
            let logits = net.predict(&utt.frames)?;
            let (l, c) = frame_scores(&logits, &utt.targets);
            loss += l;
            correct += c;
            frames += utt.n_frames();
        }
    }
    Ok(EvalMetrics::from_sums(loss, correct, frames))
}
