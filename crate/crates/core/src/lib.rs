//! Numerical core for self-guided diffusion models.
//!
//! Everything in this crate is pure computation over explicit RNG state and
//! builds without `std` (only `alloc` is required). File formats, dataset
//! generation, training orchestration and the command-line tool live in the
//! companion `sgdm` crate.
//!
//! Layout:
//! - [`diffusion`]: noise schedule, forward process, training loss,
//!   classifier-free guidance mixing and the DDIM sampler.
//! - [`denoiser`]: tensors, a small reverse-mode tape, and the conditional
//!   UNet noise predictor together with its guidance signals.
//! - [`annotation`]: feature extractors, k-means self-labelling, box and
//!   segmentation proposals, multi-hot pooling, corruption and NMI.
//! - [`metrics`]: Gaussian feature statistics, Fréchet distance and the
//!   Inception-Score style diversity metric.
//! - [`optim`]: AdamW and parameter EMA.
#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

pub mod annotation;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod scalar;

pub use error::{Error, Result};
pub use image::Image;
pub use scalar::Scalar;
