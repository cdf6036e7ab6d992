//! Self-contrastive pretraining of long-document encoders.
//!
//! The crate trains a small windowed-attention encoder from scratch with a
//! multiple-negatives ranking objective over token-mask augmented views,
//! optionally combined with a divergence loss computed by an ensemble of
//! scalar-scoring subnetworks. Frozen embeddings are then evaluated with
//! linear / MLP probes, few-shot probes, and collapse diagnostics.
//!
//! Modules follow the experiment pipeline:
//!
//! * [`corpus`] — synthetic corpus generation, JSONL ingestion, splits, batching
//! * [`encoder`] — token embeddings, sliding-window attention, pooling, projector
//! * [`objectives`] — contrastive and divergence losses with analytic gradients
//! * [`training`] — AdamW, the deterministic pretraining loop, checkpoints
//! * [`eval`] — frozen-embedding probes, F1 metrics, few-shot harness, diagnostics

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod objectives;
pub mod rng;
pub mod tensors;
pub mod training;

pub use error::{Error, Result};
