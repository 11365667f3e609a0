//! Feature distillation from a trained denoising diffusion teacher.
//!
//! A convolutional student backbone is pretrained by regressing the
//! intermediate decoder features (and optionally the softened per-pixel
//! labels) of a frozen diffusion model, then evaluated by finetuning on
//! semantic segmentation. The crate ships the full pipeline: the diffusion
//! teacher, feature datasets, the student with its feature regressor, the
//! distillation objectives, and a deterministic training harness with a CLI.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod harness;
pub mod error;
pub mod interpreter;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod pyramid;
pub mod regressor;
pub mod report;
pub mod seeding;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
