//! Datasets, annotation, training, evaluation and file formats for
//! self-guided diffusion experiments, built on `sgdm-core`.

pub mod annotate;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
