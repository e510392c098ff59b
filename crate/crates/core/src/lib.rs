//! Hyperbolic-curvature few-shot learning for multimodal sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays and a define-by-run reverse-mode tape;
//! - [`geometry`]: Poincaré-ball projection, distance and prototypes;
//! - [`encoder`]: per-modality sequence encoders, cross-modal attention
//!   and the gating network;
//! - [`model`]: the ordered parameter set of the embedding function;
//! - [`fewshot`]: episodes, embedding, prototype classification and losses;
//! - [`train`]: Adam, the episodic trainer, evaluation and repeated runs;
//! - [`data`]: synthetic generation, `(N, L, D)` files and standardisation;
//! - [`stats`]: Welch's t-test and the ablation runner;
//! - [`blob`]: binary model files;
//! - [`checks`]: finite-difference gradient checks;
//! - [`cli`]: config files and the command verbs.

pub mod blob;
pub mod checks;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod geometry;
pub mod model;
pub mod params;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
