//! Feature-space virtual adversarial training for unsupervised domain
//! adaptation on pre-extracted video features.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`featio`]: feature containers, per-vector z-score normalization, the
//!   FVAT file format and a synthetic domain-shift benchmark.
//! - [`network`]: spatial, temporal-relation and classifier modules plus three
//!   gradient-reversal domain discriminators.
//! - [`losses`]: classification, domain, attentive-entropy and
//!   conditional-entropy objectives.
//! - [`vat`]: the adversarial perturbation search and smoothness penalty.
//! - [`trainer`]: Adam, EMA shadow weights, the training loop and evaluation.
//! - [`cli`]: the `featvat` command-line front end.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod featio;
pub mod losses;
pub mod network;
pub mod par;
pub mod rng;
pub mod trainer;
pub mod vat;

pub use error::{Error, Result};
