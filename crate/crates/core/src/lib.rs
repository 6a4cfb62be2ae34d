//! Distractor-aware contrastive finetuning of embedding models for few-shot
//! classification.
//!
//! The crate implements the full pipeline on plain feature-vector domains:
//! a small MLP projection model with exact reverse-mode gradients
//! ([`model`]), stochastic anchor-positive pairing and distractor batching
//! ([`pairing`]), the contrastive loss family with batch-size weighting and a
//! multitask cross-entropy extension ([`loss`]), the per-task finetuning loop
//! ([`finetune`]), nearest-mean evaluation ([`evaluate`]), cluster-spread /
//! cluster-separation diagnostics and a proxy A-distance probe
//! ([`diagnostics`]), synthetic and file-based domains with episodic task
//! sampling ([`taskgen`]), and a deterministic multi-arm experiment runner
//! ([`experiment`]).

pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod finetune;
pub mod loss;
pub mod model;
pub mod pairing;
pub mod rng;
pub mod taskgen;

pub use error::{ConftError, Result};
