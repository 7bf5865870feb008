//! Dual-representation multimodal recommender.
//!
//! The pipeline goes: ingest interaction/feature files, build the normalized
//! user-item adjacency plus per-modality kNN relation graphs, run the dual-line
//! forward pass (behavior line over the interaction graph, modal line over the
//! relation graphs), optimize the combined ranking/alignment objective, and
//! evaluate with top-K ranking metrics. Diagnostics track how far learned
//! modal representations drift from the original features and how well the
//! two lines align.
//!
//! Modules map onto pipeline stages:
//! - [`ingest`]: interaction loading, k-core filtering, splitting, user features
//! - [`sparse`] / [`graph`]: sparse matrices, adjacency and relation graphs
//! - [`tensor`] / [`params`] / [`autograd`]: dense kernels, parameters, Adam,
//!   reverse-mode gradients over a fixed operator set, gradient checking
//! - [`model`]: the dual-line forward pass
//! - [`objectives`]: BPR, alignment (InfoNCE), similarity supervision, totals
//! - [`sampling`] / [`train`] / [`eval`]: batch sampling, training loop, metrics
//! - [`diagnostics`]: drift / alignment time series and per-line evaluation
//! - [`baselines`]: LightGCN-only and VBPR-style hosts for the alignment plug
//! - [`synthetic`]: block-preference dataset generator for offline runs

pub mod autograd;
pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod objectives;
pub mod params;
pub mod sampling;
pub mod sparse;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{DreamError, Result};
