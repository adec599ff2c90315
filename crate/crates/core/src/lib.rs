//! Core library for the `vidistill` video-language distillation pipeline.
//!
//! Everything here is CPU-only, deterministic for a given seed, and small
//! enough to run on a laptop: a tape-based autodiff engine over 2-D
//! tensors, a byte-level BPE tokenizer, a synthetic "shapes in motion"
//! video world with ground-truth captions, a tiny encoder-decoder
//! video-language model, two-stage adaptation (visual, then language),
//! pseudo-caption distillation via nucleus sampling, a contrastive dual
//! encoder trained on those pseudo-captions, retrieval/QA/captioning
//! metrics, and an end-to-end pipeline driver with cached stages.

pub mod adapt;
pub mod dual;
pub mod checkpoint;
pub mod error;
pub mod instruct;
pub mod seeding;
pub mod tensor;
pub mod tokenizer;
pub mod vlm;
pub mod world;

pub use error::{Error, Result};
