//! Self-supervised prosody representation learning and prosody-conditioned
//! zero-shot voice conversion, built to run end to end on a single CPU with
//! a synthetic ground-truth corpus.
//!
//! The crate is organized around eight modules:
//!
//! - [`signal`]: deterministic DSP — STFT, mel projection, Griffin-Lim,
//!   pitch/volume transforms, F0 and RMS measurement, WAV I/O.
//! - [`corpus`]: synthetic multi-speaker corpus generation with exact
//!   prosody ground truth, WAV ingestion, and augmentation-pair batching.
//! - [`grad`]: a minimal reverse-mode autodiff core, verified against
//!   finite differences.
//! - [`prosody`]: the rank-loss prosody encoder.
//! - [`vc`]: the voice-conversion autoencoder (instance norm, vector
//!   quantization, contrastive predictive coding, prosody conditioning).
//! - [`train`]: seeded training loops, Adam, binary checkpoints.
//! - [`eval`]: rank-score densities, KL-divergence transfer metrics, and a
//!   speaker-similarity proxy.
//! - [`cli`]: the `prosody-ssl` executable.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod grad;
pub mod prosody;
pub mod signal;
pub mod train;
pub mod vc;

pub use error::{Error, Result};
