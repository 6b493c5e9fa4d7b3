//! Run-level configuration gathering every tunable of the pipeline.

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::embedding::{CovarianceType, EmbeddingConfig};
use crate::network::{Activation, LrSchedule, NetworkSpec, SiTrainConfig};
use crate::sat::SatTrainConfig;
use crate::{Error, Result};

/// Hidden-layer shape; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub n_layers: usize,
    /// Width of each hidden affine output (before the activation).
    pub hidden_width: usize,
    pub activation: Activation,
}

impl TopologyConfig {
    pub fn spec(&self, input_dim: usize, n_classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::stacked(input_dim, self.n_layers, self.hidden_width, self.activation, n_classes)
    }
}

/// Where the speaker-dependent layer sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdLayer {
    First,
    Middle,
    Last,
    #[serde(untagged)]
    Index(usize),
}

impl SdLayer {
    pub fn index(self, n_layers: usize) -> usize {
        match self {
            SdLayer::First => 0,
            SdLayer::Middle => n_layers / 2,
            SdLayer::Last => n_layers.saturating_sub(1),
            SdLayer::Index(i) => i,
        }
    }

    pub fn label(self) -> String {
        match self {
            SdLayer::First => "first".into(),
            SdLayer::Middle => "middle".into(),
            SdLayer::Last => "last".into(),
            SdLayer::Index(i) => i.to_string(),
        }
    }
}

impl std::str::FromStr for SdLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(SdLayer::First),
            "middle" => Ok(SdLayer::Middle),
            "last" => Ok(SdLayer::Last),
            _ => s
                .parse()
                .map(SdLayer::Index)
                .map_err(|_| Error::Argument(format!("SD layer must be first, middle, last or an index, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scma_folds: usize,
    /// Embed test speakers from their first utterance only.
    pub single_utterance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Speakers per true cluster moved to the test side by `gen-data`.
    pub holdout_per_cluster: usize,
    pub embedding: EmbeddingConfig,
    pub topology: TopologyConfig,
    pub si: SiTrainConfig,
    pub sat: SatTrainConfig,
    pub n_clusters: usize,
    pub sd_layer: SdLayer,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            holdout_per_cluster: 2,
            embedding: EmbeddingConfig::default(),
            topology: TopologyConfig {
                n_layers: 3,
                hidden_width: 64,
                activation: Activation::Pnorm { p: 2.0, group_size: 4 },
            },
            si: SiTrainConfig::default(),
            sat: SatTrainConfig {
                lr_sd: 0.01,
                lr_shared: 0.01,
                ..SatTrainConfig::default()
            },
            n_clusters: 10,
            sd_layer: SdLayer::First,
            eval: EvalConfig {
                scma_folds: 5,
                single_utterance: false,
            },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        RunConfig {
            embedding: EmbeddingConfig {
                ubm_components: 512,
                covariance: CovarianceType::Full,
                embedding_dim: 100,
                ..desk.embedding
            },
            topology: TopologyConfig {
                n_layers: 7,
                hidden_width: 2000,
                activation: Activation::Pnorm { p: 2.0, group_size: 5 },
            },
            si: SiTrainConfig {
                schedule: LrSchedule {
                    initial: 0.02,
                    final_lr: 0.002,
                },
                batch_size: 512,
                ..desk.si
            },
            sat: SatTrainConfig {
                lr_sd: 0.1,
                lr_shared: 0.1,
                max_iters: 10,
                batch_size: 512,
                ..desk.sat
            },
            n_clusters: 10,
            sd_layer: SdLayer::First,
            ..desk
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Argument(format!("unknown preset {name:?} (expected desk or paper)"))),
        }
    }

    pub fn sd_index(&self) -> usize {
        self.sd_layer.index(self.topology.n_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let e = &self.embedding;
        if e.ubm_components == 0 || e.em_iters == 0 || e.embedding_dim == 0 {
            return Err(Error::Argument(
                "embedding: ubm_components, em_iters and embedding_dim must be positive".into(),
            ));
        }
        if !(e.relevance > 0.0 && e.relevance.is_finite()) {
            return Err(Error::Argument("embedding: relevance must be positive".into()));
        }
        // Topology constraints that do not depend on the data widths.
        self.topology.spec(1, 1)?;
        if self.si.batch_size == 0 {
            return Err(Error::Argument("si: batch_size must be positive".into()));
        }
        let s = &self.si.schedule;
        if !(s.initial >= 0.0 && s.final_lr >= 0.0) || (s.initial == 0.0) != (s.final_lr == 0.0) {
            return Err(Error::Argument("si: learning rates must be nonnegative and both zero or both positive".into()));
        }
        self.sat.validate()?;
        if self.n_clusters == 0 {
            return Err(Error::Argument("n_clusters must be at least 1".into()));
        }
        if self.sd_index() >= self.topology.n_layers {
            return Err(Error::Argument(format!(
                "SD layer {} out of range for {} layers",
                self.sd_index(),
                self.topology.n_layers
            )));
        }
        if self.eval.scma_folds < 2 {
            return Err(Error::Argument("eval: scma_folds must be at least 2".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}
