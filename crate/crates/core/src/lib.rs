//! Two-stage transformer anomaly detection and localization.
//!
//! Stage 1 pretrains a masked autoencoder on normal images; stage 2
//! freezes the encoder and fine-tunes the decoder with dual heads —
//! reconstruction and per-pixel corruption classification — on synthetic
//! pixel corruptions. Inference fuses the reconstruction-error map `E`
//! with the pixel-anomaly probability map `P` into a score map
//! `S = E ⊙ P`; the image score is `mean(S)`.
//!
//! Everything is built on the in-crate tensor/autodiff engine in
//! [`tensor`]; no ML framework is involved.

pub mod augment;
pub mod data;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod seeding;
pub mod stage2;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
