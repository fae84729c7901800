//! Weakly-supervised phrase grounding with deconfounded attention and
//! counterfactual similarity debiasing.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker;
//! - [`kmeans`] — seeded Lloyd clustering used to build confounder
//!   codebooks;
//! - [`corpus`] — the grounding data model, file formats, and a synthetic
//!   corpus generator with planted structure;
//! - [`ida`] — codebook-conditioned (deconfounded) attention stacks;
//! - [`ici`] — counterfactual similarity: total effect, direct effect,
//!   and their difference;
//! - [`model`] — parameter container, configuration, and checkpoints;
//! - [`training`] — contrastive grounding loss, consistency regularizer,
//!   and the AdamW training loop;
//! - [`eval`] — box IoU, ranking, recall@k, and stratified reports.

pub mod corpus;
pub mod eval;
pub mod ici;
pub mod ida;
pub mod kmeans;
pub mod model;
pub mod training;
pub mod tensor;
