//! Held-out comparison of SI and SAT models, and speaker-cluster matching
//! accuracy (SCMA) under cross-validation.

mod compare;
mod pipeline;
mod scma;
mod table;

pub use compare::{compare_si_sat, ComparisonReport, EmbeddingSource, SpeakerRow};
pub use pipeline::{run_pipeline, run_sweep, PipelineOutput, SweepCell, SweepReport};
pub use scma::{scma, score_fold, FoldScore, ScmaReport};
pub use table::{render_text, render_tsv};
