//! Conditional parameter diffusion for LoRA adapters.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense arrays, a reverse-mode tape, optimizers and a
//!   finite-difference gradient audit.
//! * [`lora`]: low-rank adapters, merging and the flat parameter layout.
//! * [`tasks`]: toy task families, the frozen base network and checkpoint
//!   harvesting.
//! * [`paramstore`]: normalization of checkpoint sets and the `.pset` format.
//! * [`autoencoder`]: the 1D-conv parameter autoencoder.
//! * [`conddiff`]: noise schedule, condition projectors, the 1D U-Net denoiser,
//!   training and ancestral sampling.
//! * [`bench`]: generation, baselines, ablations and weight-space analyses.
//! * [`pipeline`]: configuration, manifests and the staged commands used by the CLI.

pub mod autoencoder;
pub mod bench;
pub mod conddiff;
pub mod config;
pub mod container;
mod error;
pub mod lora;
pub mod numerics;
pub mod paramstore;
pub mod pipeline;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
