//! Output-feedback Q-learning for nonlinear plants that admit a finite
//! linear (Koopman) embedding.
//!
//! The pipeline is: collect short input/output trajectories
//! ([`datastore`]), build a non-minimal state from past data
//! ([`embedding`]), then run model-free policy iteration on that state
//! ([`qlearn`]). [`oracle`] holds the model-based reference quantities
//! used for validation.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datastore;
pub mod embedding;
pub mod error;
pub mod json;
pub mod numerics;
pub mod oracle;
pub mod qlearn;
pub mod systems;

pub use error::{Error, ErrorClass, Result};
