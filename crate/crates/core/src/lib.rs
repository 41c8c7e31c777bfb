//! Desk-scale RGB/thermal fusion stack.
//!
//! A self-contained f64 tensor engine with reverse-mode autodiff, toy ViT
//! encoders for paired RGB and thermal images, a text-guided dual-attention
//! fusion block with token-wise gated residual injection, the four-term
//! training objective, dual-group AdamW with freeze enforcement, a synthetic
//! paired-scene generator, and a benchmark scorer.
//!
//! Everything is deterministic given a seed. Data-parallel inner loops
//! (dataset generation, batch gradient accumulation, evaluation, gradient
//! probes) run on rayon when the `parallel` feature is enabled (default) and
//! fall back to sequential execution otherwise; results are bit-identical
//! either way.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Tape, Val};
pub use tensor::Tensor;
