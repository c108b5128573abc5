//! Compositional vision-language alignment engine.
//!
//! A desk-scale, fully self-contained implementation of decomposed
//! prompt/feature alignment for open-vocabulary instance segmentation:
//!
//! - [`tensor`]: float64 tensors with reverse-mode autodiff
//! - [`prompt`]: symbolic vocabulary, prompt decomposition, embeddings
//! - [`fgca`]: feature-gated cross-attention with multiplicative AND gating
//! - [`score`]: decomposed matching logits, log-space AND aggregation, losses
//! - [`matching`]: Hungarian assignment of predictions to ground truth
//! - [`model`]: a query-based toy segmenter and its training loop
//! - [`synth`]: procedural compositional benchmark generation
//! - [`eval`]: mask AP, relative drop and AND-efficiency metrics
//! - [`io`]: on-disk formats (dataset, checkpoint, PGM/PPM, JSONL)

pub mod error;
pub mod eval;
pub mod fgca;
pub mod gradcheck;
pub mod matching;
pub mod prompt;
pub mod rng;
pub mod score;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
