//! Mixup regularized adversarial networks for multi-domain text classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors with a tape-based reverse-mode engine
//!   and a central-difference gradient oracle.
//! - [`optim`]: Adam with bias correction, one state per network component.
//! - [`model`]: shared extractor, per-domain extractors, multinomial domain
//!   discriminator and sentiment classifier.
//! - [`mixup`]: Beta-distributed interpolation and the three mixup losses.
//! - [`training`]: alternating discriminator / feature updates, evaluation
//!   and model selection.
//! - [`data`]: review corpus ingestion, vocabulary, stratified folds and a
//!   synthetic multi-domain generator.
//! - [`config`], [`cli`], [`checkpoint`]: experiment plumbing.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod training;

pub use error::{MranError, Result};

/// Random stream used everywhere randomness is consumed. ChaCha keeps runs
/// bit-reproducible across platforms and crate versions.
pub type SeededRng = rand_chacha::ChaCha8Rng;
