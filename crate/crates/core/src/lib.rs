//! Emotion recognition and emotion-flip trigger reasoning for conversations.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`corpus`] loads dialogue files and derives training views.
//! * [`embed`] turns utterances into cached vectors and builds one-hot features.
//! * [`ptz`] computes the probable trigger zone and dataset skew reports.
//! * [`erc_net`] is the masked memory network for per-utterance emotions.
//! * [`efr_net`] is the speaker- and emotion-aware trigger classifier.
//! * [`runner`] trains both models and reads/writes checkpoints.
//! * [`eval`] scores predictions and runs baselines and the masking ablation.
//! * [`synthetic`] generates small seeded corpora for tests and demos.

pub mod corpus;
pub mod efr_net;
pub mod embed;
pub mod erc_net;
pub mod eval;
pub mod error;
pub mod nn;
pub mod ptz;
pub mod runner;
pub mod synthetic;

pub use error::{Error, Result};
