//! Stuttering event detection toolkit.
//!
//! Audio is turned into 80-dim log-mel fbank frames ([`frontend`]), encoded
//! by a Conformer stack followed by BiLSTM layers, and classified by one
//! binary head per disfluency type ([`network`]). [`trainer`] and
//! [`metrics`] cover optimisation and scoring; [`corpus`] handles labels,
//! manifests and synthetic data.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
