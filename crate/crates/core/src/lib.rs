//! Severity-conditioned speech-style generation on a synthetic utterance world:
//! a disentangled severity encoder, a FiLM-conditioned flow-matching decoder,
//! prototype/SLERP severity control, camouflage-oriented augmentation and the
//! detector protocol used to measure its benefit.

pub mod cdoa;
pub mod dae;
pub mod detector;
pub mod error;
pub mod gen;
pub mod markers;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod severity;
pub mod world;

pub use error::{Error, Result};
