//! Few-shot episodic learning engine.
//!
//! Pipeline: case-annotated image datasets ([`dataset`]) are sliced into
//! N-way K-shot episodes with leakage-free test tasks ([`episodes`]); a
//! compact trainable patch-transformer encoder ([`encoder`]) is meta-trained
//! with a prototype classifier and batch spectral regularization
//! ([`fewshot`]); per-task adaptation fine-tunes either a linear head or the
//! prototype classifier ([`adapt`]); metrics and the ablation harness live in
//! [`eval`]; the command-line surface in [`cli`].

pub mod adapt;
pub mod dataset;
pub mod encoder;
pub mod episodes;
pub mod fewshot;
pub mod seeds;
