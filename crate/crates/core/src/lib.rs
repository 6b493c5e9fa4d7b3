//! Speaker-cluster adaptive training (SAT) for feed-forward frame classifiers.
//!
//! The pipeline:
//!
//! 1. [`embedding`] trains a GMM background model, MAP-adapts it per speaker
//!    and projects the resulting mean supervectors to unit-length embeddings.
//! 2. [`clustering`] groups training speakers with Ward's method over those
//!    embeddings and computes one embedding per cluster from pooled frames.
//! 3. [`network`] trains a speaker-independent classifier, and [`sat`] turns
//!    it into one shared layer stack plus a per-cluster speaker-dependent
//!    layer, trained by alternating the two parameter groups.
//! 4. Unseen speakers are matched to the most similar cluster and decoded
//!    with that cluster's composed network; [`eval`] scores both the
//!    resulting classifiers and the cluster matching accuracy (SCMA).

pub mod clustering;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod network;
pub mod parallel;
pub mod persist;
pub mod sat;

pub use error::{Error, Result};
pub use nalgebra;
