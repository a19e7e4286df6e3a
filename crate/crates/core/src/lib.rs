//! Deterministic simulator of aggregated vertical federated learning (aggVFL)
//! with a feature-based triggerless backdoor attack, gradient/inference-phase
//! defenses, and the evaluation metrics used to judge them.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`nn`] — dense-layer neural network kernel (forward, exact reverse-mode
//!   gradients, softmax cross-entropy, SGD),
//! - [`data`] — dataset ingestion (IDX, CSV), synthetic blobs, vertical
//!   column partitioning, and auxiliary-data selection,
//! - [`engine`] — the split training/inference protocol with embedding
//!   gradient routing and the attacker's passive embedding recorder,
//! - [`attack`] — label inference, poison generation, and backdoor execution,
//! - [`defense`] — gradient clipping/compression/DP transforms and the
//!   inference-phase embedding norm monitor,
//! - [`metrics`] — LISR / mASR / rASR / MTA computation.
//!
//! All randomness flows through explicitly seeded ChaCha streams, so two runs
//! with the same seed and configuration are bit-identical.

pub mod attack;
pub mod data;
pub mod defense;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;

pub use error::{Result, VflError};
pub use nn::Matrix;
