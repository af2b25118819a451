// SPDX-License-Identifier: MIT OR Apache-2.0

//! # patchlens
//!
//! Mechanistic interpretability tooling for neural ranking models.
//!
//! The crate re-implements a BERT-style encoder with named hook points so
//! that any intermediate activation can be cached or overwritten, and builds
//! activation patching for bi-encoders (`Dot`) and cross-encoders (`Cat`) on
//! top of it:
//!
//! - [`numerics`]: the dense `f32` tensor kernel used by the forward pass.
//! - [`tokenizer`]: WordPiece tokenization and query/document sequence layout.
//! - [`encoder`]: the hooked forward pass, activation cache, safetensors IO and
//!   checkpoint-name mapping.
//! - [`ranking`]: relevance scoring for `Dot` and `Cat` models.
//! - [`perturb`]: dataset ingestion, IDF, perturbations and paired inputs.
//! - [`patching`]: the baseline / perturbed / patched three-run procedure and
//!   effect matrices.
//! - [`experiment`]: config-driven orchestration behind the `patchlens` CLI.
//!
//! ```no_run
//! use patchlens::encoder::{random_init, ModelConfig};
//! use patchlens::ranking::{CatModel, Ranker};
//!
//! # fn main() -> patchlens::Result<()> {
//! let config = ModelConfig::tiny(100);
//! let weights = random_init(&config, 7)?;
//! let model = Ranker::Cat(CatModel::random(config, weights, 1, 7)?);
//! # let _ = model;
//! # Ok(())
//! # }
//! ```

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod patching;
pub mod perturb;
pub mod ranking;
pub mod tokenizer;

pub use error::{Error, Result};
pub use numerics::Tensor;
