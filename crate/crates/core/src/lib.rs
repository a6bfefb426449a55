//! Multimodal emotion recognition in conversation.
//!
//! The pipeline, end to end: per-modality Bi-LSTM context encoders feed a
//! gated feature filter (audio/visual) and a relation-typed conversation
//! graph encoder (text); filtered audio/visual features act as prompts in a
//! cross-modal prompt-transformer fused with the graph-enhanced text; the
//! fused representation is trained with cross-entropy plus supervised and
//! unsupervised contrastive objectives.
//!
//! Everything is computed in f64 on a reverse-mode autodiff tape
//! ([`tensor`]), is deterministic for a fixed seed ([`rng`]), and is small
//! enough to train on synthetic data on one CPU core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mpt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{AblationFlags, Modalities, Modality, RunConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Array, ParamSet, Tape, TensorId};
