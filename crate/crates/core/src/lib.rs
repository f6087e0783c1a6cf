//! Face-morphing attacks against a toy style-based generator, and the
//! morph-vulnerability metrics used to evaluate face recognition against them.
//!
//! Layout:
//!
//! - [`tensor`], [`graph`], [`adam`], [`msssim`], [`mten`]: numeric substrate
//!   (dense tensors, reverse-mode differentiation, optimizer, image metric,
//!   raw tensor files).
//! - [`stylegen`]: the generator, its mapping network and latent statistics.
//! - [`nets`]: perceptual feature net, biometric embedder and one-shot encoder.
//! - [`morpher`]: latent inversion, midpoint and dual-biometric morphs.
//! - [`vulneval`]: population, accomplice selection, thresholds, FAR / FRR /
//!   MMPMR / RMMR, ROC and the attack campaign.
//! - [`config`]: the JSON run configuration consumed by the CLI.

pub mod adam;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod morpher;
pub mod msssim;
pub mod mten;
pub mod nets;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod stylegen;
pub mod tensor;
pub mod vulneval;

pub use error::{Error, Result};
pub use graph::{evaluate_and_backprop, Graph, Var};
pub use tensor::{Real, Tensor};
