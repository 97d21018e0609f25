//! Decoupled representation learning with knowledge fusion for
//! speech/text emotion recognition.
//!
//! The crate is organized bottom-up:
//!
//! * [`numcore`] – reverse-mode differentiable tensors and test oracles.
//! * [`dataio`] – feature fixtures, synthetic data, batching and pair shuffling.
//! * [`orl`] – progressive augmentation and contrastive mutual-information losses.
//! * [`kf`] – fusion encoder, consistency discriminator and classifier.
//! * [`train`] – model assembly, AdamW, metrics, checkpoints and exports.
//! * [`cli`] – configuration and the `drkf` command-line front end.

pub mod error;
pub mod dataio;
pub mod kf;
pub mod nn;
pub mod numcore;
pub mod orl;
pub mod train;
pub mod cli;

pub use error::{Error, Result};
