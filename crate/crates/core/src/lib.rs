//! Toolkit for studying retrieval-augmented QA under knowledge conflict.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`corpus`] — QA instances, retrieved document sets, perturbation labels,
//!   and deterministic JSONL interchange.
//! * [`entity`] — controllable entity corpus-substitution perturbation.
//! * [`macnoise`] — LLM-instructed counterfactual document generation and
//!   its rule-based validator.
//! * [`reader`] — a small discriminator-augmented encoder-decoder reader
//!   trained with the joint QA + BCE + contrastive objective.
//! * [`prompting`] — in-context prompt variants, discriminator injection,
//!   and answer ensembling over one-shot iterations.
//! * [`eval`] — exact-match scoring, classification metrics, stability, and
//!   sweep tables.
//! * [`synth`] — synthetic corpora for controlled experiments.
//!
//! Numeric code is generic over the scalar type via [`scalar::Scalar`];
//! `f32` is the training default and `f64` is used where tests need tight
//! tolerances.

pub mod client;
pub mod corpus;
pub mod entity;
pub mod eval;
pub mod macnoise;
pub mod prompting;
pub mod reader;
pub mod scalar;
pub mod synth;

pub use scalar::Scalar;

/// Reader specialization used for training and the CLI.
pub type Reader32 = reader::ReaderModel<f32>;
/// Reader specialization for high-precision checks.
pub type Reader64 = reader::ReaderModel<f64>;
