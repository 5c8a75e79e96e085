//! Adversarial contrastive pretraining at desk scale.
//!
//! The crate covers the full pipeline: robustness-aware view construction
//! (adversarial and frequency views), multi-view contrastive losses,
//! pseudo-label supervision from offline clustering, triple-routed batch
//! normalization, projected-gradient attacks, and the
//! pretrain → finetune → evaluate loop with diagnostic visualizations.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability. The `advcl` binary wraps the same entry points behind
//! subcommands for scripted runs.

pub mod ablate;
pub mod analysis;
pub mod attack;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod freq;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod plot;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
