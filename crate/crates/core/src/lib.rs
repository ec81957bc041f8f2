//! Reference-guided segmentation assistant and an assistant-augmented
//! weak-to-strong semi-supervised trainer, sized to run on a CPU.
//!
//! The crate is organized by stage:
//!
//! - [`data`]: dataset manifests, the synthetic corpus and augmentation.
//! - [`templatebank`]: exemplar descriptors, retrieval and sampling.
//! - [`segmenter`]: the prompt- and memory-conditioned assistant.
//! - [`ssl`]: the student/EMA-teacher trainer with dual pseudo-labels.
//! - [`metrics`]: Dice, IoU and HD95.
//! - [`experiment`]: end-to-end orchestration used by the CLI.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod segmenter;
pub mod ssl;
pub mod templatebank;
pub mod tensor;

pub use error::{Error, Result};
