//! hammerlite — neural premise selection at desk scale.
//!
//! A two-stage retrieve-then-rerank premise selection engine: a contrastively
//! trained bi-encoder (`select`) retrieves candidate premises by cosine
//! similarity, and a cross-encoder (`rerank`) re-scores each
//! (proof state, premise) pair jointly. Both stages share a small decoder-only
//! transformer backbone trained from scratch. A BM25 baseline, a synthetic
//! corpus generator, and a proof-step evaluation harness with exact budget
//! accounting make the whole pipeline runnable and testable on a laptop
//! against a mock prover oracle.
//!
//! Module map:
//! - [`corpus`] — premises, proof states, and (state, premise) datapoints;
//!   JSONL ingestion.
//! - [`text`] — deterministic byte-level tokenizer with role tokens.
//! - [`nn`] — tensors, reverse-mode autodiff over a per-batch graph, Adam,
//!   LR schedules.
//! - [`model`] — the transformer backbone plus state/premise/rerank heads.
//! - [`training`] — contrastive SELECT training, RERANK binary classification
//!   with mined hard negatives, and the alternating loop.
//! - [`retrieval`] — embedding index, two-stage inference, BM25, ranking
//!   metrics.
//! - [`eval`] — tactic × top-k proof-step evaluation against a prover oracle.
//! - [`synth`] — deterministic synthetic corpus/benchmark generator.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod synth;
pub mod text;
pub mod training;
