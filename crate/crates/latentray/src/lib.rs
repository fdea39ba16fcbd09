//! latentray — a desk-scale toolkit for style-based synthesis of X-ray-like
//! images, latent inversion, and attribute-direction editing.
//!
//! The pipeline has five stages, each usable on its own:
//!
//! 1. [`data`] — procedural phantom chest images with a controllable
//!    heart-width ratio, plus CSV manifest ingestion and PNG preprocessing.
//! 2. [`generator`] / [`discriminator`] / [`training`] — a style-modulated
//!    generator trained adversarially, then an [`encoder`] trained against
//!    the frozen generator with cyclic reconstruction losses.
//! 3. [`inversion`] — per-image latent optimization for higher-fidelity
//!    reconstructions than one-shot encoding.
//! 4. [`analysis`] — two-class linear discriminant fits over latent codes,
//!    direction extraction, latent translations, and a cardiothoracic-ratio
//!    measurement oracle for quantifying edits.
//! 5. [`eval`] — the tiered acceptance harness behind `latentray eval`.
//!
//! Everything is seeded, sequential and `f64`: identical inputs produce
//! bit-identical outputs, including saved checkpoints.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod inversion;
pub mod losses;
pub mod nn;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
